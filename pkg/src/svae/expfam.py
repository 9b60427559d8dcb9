"""Exponential families: log partitions, expected statistics, KL, conjugate
updates and sampling.

Each family lives in a flat natural-parameter vector.  Matrix blocks are stored
densely (row-major) and symmetrized wherever they are read, so arbitrary
perturbations of the flat vector stay inside the family.

=============  ===========================================  ==========================================
family         natural parameter layout                     statistic t(.)
=============  ===========================================  ==========================================
gaussian(d)    [h, -J/2]                                    (x, x x^T)
categorical(K) log-weights                                  onehot(z)
dirichlet(K)   alpha                                        log pi
niw(d)         [k mu0, Psi + k mu0 mu0^T, k, nu + d + 2]    (S^-1 mu, -S^-1/2, -mu^T S^-1 mu/2, -log|S|/2)
mniw(m, n)     [Psi + M K M^T, M K, K, nu + m + 1 + n]      (-Q^-1/2, Q^-1 A, -A^T Q^-1 A/2, -log|Q|/2)
=============  ===========================================  ==========================================

The niw statistic pairs with (x, x x^T, 1, 1) to give log N(x | mu, S) up to
the -d/2 log 2 pi base measure; the mniw statistic pairs with
(x' x'^T, x' x^T, x x^T, 1) to give log N(x' | A x, Q) the same way.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.linalg import cho_solve
from jax.scipy.special import digamma, gammaln, logsumexp, multigammaln
from scipy import stats as sps

from svae.errors import DomainError, UsageError

LOG2PI = float(np.log(2 * np.pi))
LOG2 = float(np.log(2.0))
FAMILIES = ("gaussian", "categorical", "dirichlet", "niw", "mniw")


def _sym(a):
    return 0.5 * (a + jnp.swapaxes(a, -1, -2))


def _logdet_spd(a):
    L = jnp.linalg.cholesky(a)
    return 2.0 * jnp.sum(jnp.log(jnp.diagonal(L, axis1=-2, axis2=-1)), axis=-1)


def _inv_spd(a):
    L = jnp.linalg.cholesky(a)
    return cho_solve((L, True), jnp.eye(a.shape[-1], dtype=a.dtype))


def size(family, dims):
    if family == "gaussian":
        (d,) = dims
        return d + d * d
    if family in ("categorical", "dirichlet"):
        (k,) = dims
        return k
    if family == "niw":
        (d,) = dims
        return d + d * d + 2
    if family == "mniw":
        m, n = dims
        return m * m + m * n + n * n + 1
    raise UsageError(f"unknown family {family!r}")


@dataclass(frozen=True)
class _FamilyVector:
    family: str
    dims: tuple
    data: jax.Array

    @property
    def batch_shape(self):
        return tuple(jnp.shape(self.data)[:-1])

    def __getitem__(self, idx):
        return type(self)(self.family, self.dims, self.data[idx])


@partial(jax.tree_util.register_dataclass, data_fields=["data"], meta_fields=["family", "dims"])
@dataclass(frozen=True)
class NaturalParameters(_FamilyVector):
    """Natural parameters of one family member, or a stack of them along
    leading axes of ``data``."""


@partial(jax.tree_util.register_dataclass, data_fields=["data"], meta_fields=["family", "dims"])
@dataclass(frozen=True)
class ExpectedStatistics(_FamilyVector):
    """Mean parameters E[t(.)] in the same layout as the natural parameters."""


@partial(jax.tree_util.register_dataclass, data_fields=["data"], meta_fields=["family", "dims"])
@dataclass(frozen=True)
class SufficientStatistic(_FamilyVector):
    """(t_x(x), 1) laid out to add onto a conjugate prior's natural parameters."""


# ---------------------------------------------------------------------------
# unpacking


def _gauss_parts(v, d):
    h = v[..., :d]
    J = -2.0 * _sym(v[..., d:].reshape(v.shape[:-1] + (d, d)))
    return h, J


def _niw_parts(v, d):
    a = v[..., :d]
    B = _sym(v[..., d : d + d * d].reshape(v.shape[:-1] + (d, d)))
    kappa = v[..., d + d * d]
    nu = v[..., d + d * d + 1] - d - 2
    mu0 = a / kappa[..., None]
    Psi = B - kappa[..., None, None] * mu0[..., :, None] * mu0[..., None, :]
    return mu0, kappa, Psi, nu


def _mniw_parts(v, m, n):
    B = _sym(v[..., : m * m].reshape(v.shape[:-1] + (m, m)))
    C = v[..., m * m : m * m + m * n].reshape(v.shape[:-1] + (m, n))
    K = _sym(v[..., m * m + m * n : m * m + m * n + n * n].reshape(v.shape[:-1] + (n, n)))
    nu = v[..., -1] - m - 1 - n
    Kinv = _inv_spd(K)
    M = C @ Kinv
    Psi = _sym(B - M @ jnp.swapaxes(C, -1, -2))
    return M, K, Psi, nu


# ---------------------------------------------------------------------------
# single-vector kernels (traceable)


def _gaussian_logz(v, d):
    h, J = _gauss_parts(v, d)
    L = jnp.linalg.cholesky(J)
    mu = cho_solve((L, True), h)
    return 0.5 * h @ mu - jnp.sum(jnp.log(jnp.diag(L))) + 0.5 * d * LOG2PI


def _gaussian_stats(v, d):
    h, J = _gauss_parts(v, d)
    Sigma = _inv_spd(J)
    mu = Sigma @ h
    return jnp.concatenate([mu, (Sigma + jnp.outer(mu, mu)).ravel()])


def _categorical_logz(v, k):
    return logsumexp(v)


def _categorical_stats(v, k):
    return jax.nn.softmax(v)


def _dirichlet_logz(v, k):
    return jnp.sum(gammaln(v)) - gammaln(jnp.sum(v))


def _dirichlet_stats(v, k):
    return digamma(v) - digamma(jnp.sum(v))


def _expected_logdet_iw(Psi, nu, d):
    i = jnp.arange(1, d + 1)
    return _logdet_spd(Psi) - d * LOG2 - jnp.sum(digamma((nu - i + 1) / 2.0))


def _niw_logz(v, d):
    _, kappa, Psi, nu = _niw_parts(v, d)
    return (
        0.5 * nu * d * LOG2
        + multigammaln(nu / 2.0, d)
        - 0.5 * nu * _logdet_spd(Psi)
        - 0.5 * d * jnp.log(kappa)
        + 0.5 * d * LOG2PI
    )


def _niw_stats(v, d):
    mu0, kappa, Psi, nu = _niw_parts(v, d)
    Psi_inv = _inv_spd(Psi)
    E_prec = nu * Psi_inv
    E_prec_mu = E_prec @ mu0
    E_quad = d / kappa + mu0 @ E_prec_mu
    E_logdet = _expected_logdet_iw(Psi, nu, d)
    return jnp.concatenate(
        [E_prec_mu, (-0.5 * E_prec).ravel(), jnp.array([-0.5 * E_quad, -0.5 * E_logdet])]
    )


def _mniw_logz(v, m, n):
    _, K, Psi, nu = _mniw_parts(v, m, n)
    return (
        0.5 * nu * m * LOG2
        + multigammaln(nu / 2.0, m)
        - 0.5 * nu * _logdet_spd(Psi)
        + 0.5 * m * n * LOG2PI
        - 0.5 * m * _logdet_spd(K)
    )


def _mniw_stats(v, m, n):
    M, K, Psi, nu = _mniw_parts(v, m, n)
    Psi_inv = _inv_spd(Psi)
    E_Qinv = nu * Psi_inv
    E_QinvA = E_Qinv @ M
    E_AQA = m * _inv_spd(K) + M.T @ E_QinvA
    E_logdet = _expected_logdet_iw(Psi, nu, m)
    return jnp.concatenate(
        [(-0.5 * E_Qinv).ravel(), E_QinvA.ravel(), (-0.5 * E_AQA).ravel(), jnp.array([-0.5 * E_logdet])]
    )


_LOGZ = {
    "gaussian": _gaussian_logz,
    "categorical": _categorical_logz,
    "dirichlet": _dirichlet_logz,
    "niw": _niw_logz,
    "mniw": _mniw_logz,
}
_STATS = {
    "gaussian": _gaussian_stats,
    "categorical": _categorical_stats,
    "dirichlet": _dirichlet_stats,
    "niw": _niw_stats,
    "mniw": _mniw_stats,
}


def _kernel(table, family, dims):
    try:
        fn = table[family]
    except KeyError:
        raise UsageError(f"unknown family {family!r}") from None
    return lambda v: fn(v, *dims)


def _vectorize(fn, out_core):
    sig = "(n)->()" if out_core == 0 else "(n)->(n)"
    return jnp.vectorize(fn, signature=sig)


# ---------------------------------------------------------------------------
# validation (concrete values only; skipped while tracing)


def _is_concrete(x):
    return not isinstance(x, jax.core.Tracer)


def _require_spd(a, what):
    a = np.asarray(a)
    try:
        np.linalg.cholesky(0.5 * (a + np.swapaxes(a, -1, -2)))
    except np.linalg.LinAlgError:
        raise DomainError(f"{what} is not symmetric positive definite") from None


def check_proper(p):
    """Raise DomainError naming the violated constraint if ``p`` is improper."""
    if p.family not in FAMILIES:
        raise UsageError(f"unknown family {p.family!r}")
    v = np.asarray(p.data, dtype=float)
    if v.shape[-1] != size(p.family, p.dims):
        raise UsageError(f"{p.family}{p.dims}: expected {size(p.family, p.dims)} coefficients, got {v.shape[-1]}")
    if not np.all(np.isfinite(v)):
        raise DomainError(f"{p.family}: non-finite natural parameters")
    if p.family == "gaussian":
        _, J = _gauss_parts(v, p.dims[0])
        _require_spd(J, "gaussian precision J")
    elif p.family == "dirichlet":
        if np.any(v <= 0):
            raise DomainError("dirichlet concentration must be strictly positive")
    elif p.family == "niw":
        (d,) = p.dims
        kappa = v[..., d + d * d]
        nu = v[..., d + d * d + 1] - d - 2
        if np.any(kappa <= 0):
            raise DomainError("niw kappa must be > 0")
        if np.any(nu <= d - 1):
            raise DomainError(f"niw degrees of freedom must exceed {d - 1}")
        a = v[..., :d]
        B = v[..., d : d + d * d].reshape(v.shape[:-1] + (d, d))
        Psi = B - a[..., :, None] * a[..., None, :] / kappa[..., None, None]
        _require_spd(Psi, "niw scale matrix Psi")
    elif p.family == "mniw":
        m, n = p.dims
        K = v[..., m * m + m * n : m * m + m * n + n * n].reshape(v.shape[:-1] + (n, n))
        _require_spd(K, "mniw column precision K")
        nu = v[..., -1] - m - 1 - n
        if np.any(nu <= m - 1):
            raise DomainError(f"mniw degrees of freedom must exceed {m - 1}")
        B = v[..., : m * m].reshape(v.shape[:-1] + (m, m))
        C = v[..., m * m : m * m + m * n].reshape(v.shape[:-1] + (m, n))
        Ks = 0.5 * (K + np.swapaxes(K, -1, -2))
        Psi = B - C @ np.linalg.solve(Ks, np.swapaxes(C, -1, -2))
        _require_spd(Psi, "mniw scale matrix Psi")


def is_proper(p):
    try:
        check_proper(p)
    except DomainError:
        return False
    return True


def _maybe_check(p):
    if _is_concrete(p.data):
        check_proper(p)


# ---------------------------------------------------------------------------
# public operations


def log_partition(p: NaturalParameters):
    """log Z(eta); an array over the batch shape when ``p`` is stacked."""
    _maybe_check(p)
    return _vectorize(_kernel(_LOGZ, p.family, p.dims), 0)(p.data)


def expected_stats(p: NaturalParameters) -> ExpectedStatistics:
    """Closed-form gradient of the log partition, E[t(.)]."""
    _maybe_check(p)
    data = _vectorize(_kernel(_STATS, p.family, p.dims), 1)(p.data)
    return ExpectedStatistics(p.family, p.dims, data)


def kl_divergence(p: NaturalParameters, q: NaturalParameters):
    """KL(p || q) = <eta_p - eta_q, E_p t> - (log Z(eta_p) - log Z(eta_q))."""
    if p.family != q.family or tuple(p.dims) != tuple(q.dims):
        raise UsageError(f"KL between {p.family}{p.dims} and {q.family}{q.dims}")
    Ep = expected_stats(p).data
    return jnp.sum((p.data - q.data) * Ep, axis=-1) - (log_partition(p) - log_partition(q))


def posterior_update(prior: NaturalParameters, stats, scale=1.0) -> NaturalParameters:
    """eta0 + scale * sum_i (t(x_i), 1)."""
    if _is_concrete(scale) and not scale > 0:
        raise UsageError("scale must be positive")
    data = prior.data
    for s in stats:
        if s.family != prior.family or tuple(s.dims) != tuple(prior.dims):
            raise UsageError(f"statistic {s.family}{s.dims} does not fit prior {prior.family}{prior.dims}")
        if jnp.shape(s.data)[-1] != jnp.shape(data)[-1]:
            raise UsageError("statistic layout does not match prior layout")
        data = data + scale * s.data
    return NaturalParameters(prior.family, prior.dims, data)


def conjugate_stats(prior: NaturalParameters, value) -> SufficientStatistic:
    """(t_x(x), 1) for one observation, in ``prior``'s layout.

    ``value`` is a class index for dirichlet, a vector for niw and a pair
    ``(x_prev, x_next)`` for mniw.
    """
    fam = prior.family
    if fam == "dirichlet":
        (k,) = prior.dims
        data = jnp.zeros(k).at[value].set(1.0)
    elif fam == "niw":
        x = jnp.asarray(value, dtype=float)
        data = jnp.concatenate([x, jnp.outer(x, x).ravel(), jnp.ones(2)])
    elif fam == "mniw":
        x_prev, x_next = (jnp.asarray(a, dtype=float) for a in value)
        data = jnp.concatenate(
            [
                jnp.outer(x_next, x_next).ravel(),
                jnp.outer(x_next, x_prev).ravel(),
                jnp.outer(x_prev, x_prev).ravel(),
                jnp.ones(1),
            ]
        )
    else:
        raise UsageError(f"{fam} is not a conjugate prior family here")
    return SufficientStatistic(fam, prior.dims, data)


def statistic(family, dims, value):
    """t(value) for a realized draw of ``family`` (numpy in, numpy out)."""
    if family == "gaussian":
        x = np.asarray(value, float)
        return np.concatenate([x, np.outer(x, x).ravel()])
    if family == "categorical":
        return np.eye(dims[0])[value]
    if family == "dirichlet":
        return np.log(np.asarray(value, float))
    if family == "niw":
        mu, S = value
        P = np.linalg.inv(S)
        return np.concatenate(
            [P @ mu, (-0.5 * P).ravel(), [-0.5 * mu @ P @ mu, -0.5 * np.linalg.slogdet(S)[1]]]
        )
    if family == "mniw":
        A, Q = value
        P = np.linalg.inv(Q)
        return np.concatenate(
            [(-0.5 * P).ravel(), (P @ A).ravel(), (-0.5 * A.T @ P @ A).ravel(), [-0.5 * np.linalg.slogdet(Q)[1]]]
        )
    raise UsageError(f"unknown family {family!r}")


def sample(p: NaturalParameters, rng: np.random.Generator):
    """One draw; stacked parameters give a list of draws."""
    check_proper(p)
    v = np.asarray(p.data, dtype=float)
    if v.ndim > 1:
        return [sample(p[i], rng) for i in range(v.shape[0])]
    fam = p.family
    if fam == "gaussian":
        (d,) = p.dims
        h, J = (np.asarray(a) for a in _gauss_parts(v, d))
        L = np.linalg.cholesky(J)
        mu = np.linalg.solve(J, h)
        return mu + np.linalg.solve(L.T, rng.standard_normal(d))
    if fam == "categorical":
        w = np.exp(v - v.max())
        return int(rng.choice(len(v), p=w / w.sum()))
    if fam == "dirichlet":
        return rng.dirichlet(v)
    if fam == "niw":
        mu0, kappa, Psi, nu = niw_params(p)
        S = np.atleast_2d(sps.invwishart.rvs(df=nu, scale=Psi, random_state=rng))
        mu = rng.multivariate_normal(mu0, S / kappa)
        return mu, S
    if fam == "mniw":
        M, K, Psi, nu = mniw_params(p)
        m, n = p.dims
        Q = np.atleast_2d(sps.invwishart.rvs(df=nu, scale=Psi, random_state=rng))
        V = np.linalg.inv(K)
        A = M + np.linalg.cholesky(Q) @ rng.standard_normal((m, n)) @ np.linalg.cholesky(V).T
        return A, Q
    raise UsageError(f"unknown family {fam!r}")


# ---------------------------------------------------------------------------
# constructors and conversions


def gaussian(h, J) -> NaturalParameters:
    h = jnp.asarray(h, dtype=float)
    J = jnp.asarray(J, dtype=float)
    d = h.shape[-1]
    return NaturalParameters("gaussian", (d,), jnp.concatenate([h, (-0.5 * J).reshape(h.shape[:-1] + (d * d,))], -1))


def gaussian_from_moments(mu, Sigma) -> NaturalParameters:
    J = np.linalg.inv(np.asarray(Sigma, float))
    return gaussian(J @ np.asarray(mu, float), J)


def gaussian_from_expected(stats: ExpectedStatistics) -> NaturalParameters:
    """Invert E[(x, x x^T)] back to information form."""
    (d,) = stats.dims
    v = jnp.asarray(stats.data)
    mu = v[:d]
    Sigma = _sym(v[d:].reshape(d, d)) - jnp.outer(mu, mu)
    J = _inv_spd(Sigma)
    return gaussian(J @ mu, J)


def gaussian_info(p: NaturalParameters):
    """(h, J) of a gaussian natural parameter."""
    return _gauss_parts(jnp.asarray(p.data), p.dims[0])


def categorical(logits) -> NaturalParameters:
    logits = jnp.asarray(logits, dtype=float)
    return NaturalParameters("categorical", (logits.shape[-1],), logits)


def dirichlet(alpha) -> NaturalParameters:
    alpha = jnp.asarray(alpha, dtype=float)
    return NaturalParameters("dirichlet", (alpha.shape[-1],), alpha)


def niw(mu0, kappa, Psi, nu) -> NaturalParameters:
    mu0 = np.asarray(mu0, float)
    Psi = np.asarray(Psi, float)
    d = mu0.shape[0]
    data = np.concatenate(
        [kappa * mu0, (Psi + kappa * np.outer(mu0, mu0)).ravel(), [kappa, nu + d + 2]]
    )
    return NaturalParameters("niw", (d,), jnp.asarray(data))


def niw_params(p: NaturalParameters):
    """(mu0, kappa, Psi, nu) of a (single) niw natural parameter."""
    mu0, kappa, Psi, nu = _niw_parts(np.asarray(p.data, float), p.dims[0])
    return np.asarray(mu0), float(kappa), np.asarray(Psi), float(nu)


def mniw(M, K, Psi, nu) -> NaturalParameters:
    M = np.asarray(M, float)
    K = np.asarray(K, float)
    Psi = np.asarray(Psi, float)
    m, n = M.shape
    data = np.concatenate([(Psi + M @ K @ M.T).ravel(), (M @ K).ravel(), K.ravel(), [nu + m + 1 + n]])
    return NaturalParameters("mniw", (m, n), jnp.asarray(data))


def mniw_params(p: NaturalParameters):
    """(M, K, Psi, nu) of a (single) mniw natural parameter."""
    M, K, Psi, nu = _mniw_parts(jnp.asarray(p.data, float), *p.dims)
    return np.asarray(M), np.asarray(K), np.asarray(Psi), float(nu)


def stack(params) -> NaturalParameters:
    first = params[0]
    return NaturalParameters(first.family, first.dims, jnp.stack([q.data for q in params]))


# ---------------------------------------------------------------------------
# Fisher information of the family, i.e. the Hessian of log Z


def fisher_vector_product(p: NaturalParameters, v):
    """(d^2 log Z) v, batched over stacked parameters."""
    f = _kernel(_LOGZ, p.family, p.dims)

    def hvp(x, t):
        return jax.jvp(jax.grad(f), (x,), (t,))[1]

    return jnp.vectorize(hvp, signature="(n),(n)->(n)")(p.data, v)


def _blocks(family, dims):
    if family == "gaussian":
        (d,) = dims
        return [("vec", d), ("sym", d)]
    if family == "categorical":
        # log-weights are defined up to a shift: pin the last one
        return [("vec", dims[0] - 1), ("skip", 1)]
    if family == "dirichlet":
        return [("vec", dims[0])]
    if family == "niw":
        (d,) = dims
        return [("vec", d), ("sym", d), ("vec", 1), ("vec", 1)]
    if family == "mniw":
        m, n = dims
        return [("sym", m), ("vec", m * n), ("sym", n), ("vec", 1)]
    raise UsageError(f"unknown family {family!r}")


def symmetric_embedding(family, dims):
    """Injective linear map from minimal coordinates onto the subspace where
    every matrix block is symmetric."""
    cols = []
    offset = 0
    for kind, k in _blocks(family, dims):
        if kind == "skip":
            offset += k
        elif kind == "vec":
            for i in range(k):
                cols.append([(offset + i, 1.0)])
            offset += k
        else:
            for i in range(k):
                for j in range(i, k):
                    cols.append([(offset + i * k + j, 1.0), (offset + j * k + i, 1.0)] if i != j else [(offset + i * k + i, 1.0)])
            offset += k * k
    E = np.zeros((offset, len(cols)))
    for c, entries in enumerate(cols):
        for r, val in entries:
            E[r, c] = val
    return E


def fisher_solve(p: NaturalParameters, g, jitter=1e-10):
    """Solve (d^2 log Z) x = g within the symmetric subspace via Cholesky.

    Returns ``(x, jittered)``; ``jittered`` is true wherever the Cholesky
    factorization needed ``jitter * I`` added to succeed.
    """
    f = _kernel(_LOGZ, p.family, p.dims)
    E = jnp.asarray(symmetric_embedding(p.family, p.dims))

    def solve_one(v, rhs):
        H = jax.hessian(f)(v)
        F = E.T @ H @ E
        F = 0.5 * (F + F.T)
        L = jnp.linalg.cholesky(F)
        bad = jnp.any(jnp.isnan(L))
        L = jnp.where(bad, jnp.linalg.cholesky(F + jitter * jnp.eye(F.shape[0])), L)
        u = cho_solve((L, True), E.T @ rhs)
        return E @ u, bad

    return jnp.vectorize(solve_one, signature="(n),(n)->(n),()")(p.data, g)
