"""Local variational inference: given expected global statistics and
recognition potentials, compute the optimal local factors q*(x) (and q*(z)).

All kernels are pure jax functions so that the SVAE gradient estimator can
differentiate through them.  The public wrappers validate concrete inputs and
turn silent NaNs into exceptions.

Conventions
-----------
* Gaussian pieces are in information form: a node contributes
  ``h^T x - x^T J x / 2`` to the log density; a pair (x_prev, x_next)
  contributes ``-x_next^T J22 x_next / 2 - x_next^T J21 x_prev - x_prev^T J11 x_prev / 2``.
* Expected global statistics are dicts of flat arrays laid out like the
  natural parameters in :mod:`svae.expfam`:

  ==========  ==============================  ========================
  key         family                          used by
  ==========  ==============================  ========================
  ``pi``      dirichlet (K,)                  gmm
  ``niw``     niw, stacked (K, .)             gmm
  ``init_x``  niw (.)                         lds, slds
  ``dyn``     mniw (.) or stacked (K, .)      lds, slds
  ``init_z``  dirichlet (K,)                  slds
  ``trans``   dirichlet rows (K, K)           slds
  ==========  ==============================  ========================
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import Optional

import jax
import jax.numpy as jnp
import numpy as np
from jax import lax
from jax.scipy.linalg import cho_solve, solve_triangular
from jax.scipy.special import logsumexp

from svae.errors import InputError, NumericalError, UsageError
from svae.expfam import LOG2PI

GlobalExpectedStats = dict


def _sym(a):
    return 0.5 * (a + jnp.swapaxes(a, -1, -2))


@partial(jax.tree_util.register_dataclass, data_fields=["h", "prec"], meta_fields=[])
@dataclass(frozen=True)
class EvidencePotentials:
    """Diagonal Gaussian potentials ``h^T x - sum(prec * x**2) / 2`` per frame."""

    h: jax.Array
    prec: jax.Array

    @property
    def T(self):
        return self.h.shape[0]

    @property
    def J(self):
        return jnp.vectorize(jnp.diag, signature="(m)->(m,m)")(self.prec)

    def expected(self, mean, cov):
        """E[psi(x)] under per-frame moments."""
        second = jnp.diagonal(cov, axis1=-2, axis2=-1) + mean**2
        return jnp.sum(self.h * mean) - 0.5 * jnp.sum(self.prec * second)


_LP_FIELDS = [
    "mean", "cov", "cross", "z_marginals", "z_pairwise", "x_sample", "z_sample",
    "log_z", "kl", "surrogate", "stats", "trace", "n_iters", "eta_x", "eta_z", "filt_ok",
]


@partial(jax.tree_util.register_dataclass, data_fields=_LP_FIELDS, meta_fields=["kind"])
@dataclass(frozen=True)
class LocalPosterior:
    """Optimized local factors and everything the gradient estimator needs.

    ``stats`` holds E[(t_x, 1)] aggregated into the global parameter layout
    (the conjugate update direction); ``eta_x``/``eta_z`` keep the natural
    parameters of q*(x)/q*(z) so the local KL can be recomputed independently.
    """

    kind: str
    mean: jax.Array
    cov: jax.Array
    cross: Optional[jax.Array] = None
    z_marginals: Optional[jax.Array] = None
    z_pairwise: Optional[jax.Array] = None
    x_sample: Optional[jax.Array] = None
    z_sample: Optional[jax.Array] = None
    log_z: Optional[jax.Array] = None
    kl: Optional[jax.Array] = None
    surrogate: Optional[jax.Array] = None
    stats: dict = field(default_factory=dict)
    trace: Optional[jax.Array] = None
    n_iters: Optional[jax.Array] = None
    eta_x: dict = field(default_factory=dict)
    eta_z: dict = field(default_factory=dict)
    filt_ok: Optional[jax.Array] = None


# ---------------------------------------------------------------------------
# unpacking expected statistics into potentials


def niw_node(s, d):
    """Prior node (h, J) and scalar term from niw expected statistics."""
    h = s[..., :d]
    J = -2.0 * _sym(s[..., d : d + d * d].reshape(s.shape[:-1] + (d, d)))
    c = s[..., -2] + s[..., -1]
    return h, J, c


def mniw_pair(s, m):
    """Pair blocks (J11, J21, J22) and scalar term from mniw expected statistics."""
    shp = s.shape[:-1] + (m, m)
    S1 = s[..., : m * m].reshape(shp)
    S2 = s[..., m * m : 2 * m * m].reshape(shp)
    S3 = s[..., 2 * m * m : 3 * m * m].reshape(shp)
    return -2.0 * _sym(S3), -S2, -2.0 * _sym(S1), s[..., -1]


def _pair_stats(mean, cov, cross):
    """(E x' x'^T, E x' x^T, E x x^T) for consecutive frames, flattened."""
    second = cov + mean[:, :, None] * mean[:, None, :]
    T, m = mean.shape
    return jnp.concatenate(
        [second[1:].reshape(T - 1, m * m), cross.reshape(T - 1, m * m), second[:-1].reshape(T - 1, m * m)], axis=1
    )


def _node_stats(mean, cov):
    return jnp.concatenate([mean, (cov + jnp.outer(mean, mean)).ravel(), jnp.ones(2)])


# ---------------------------------------------------------------------------
# Gaussian chain


def info_kalman(J0, h0, J11, J21, J22, Jn, hn, eps=None):
    """Exact inference in a Gaussian chain given in information form.

    Forward information filter, then a backward pass that yields smoothed
    moments and (from the same backward conditionals) a joint sample.

    Returns a dict with ``mean (T,m)``, ``cov (T,m,m)``,
    ``cross (T-1,m,m) = E[x_{t+1} x_t^T]``, ``log_z`` (log of the integral of
    the unnormalized chain density), ``sample (T,m)`` and ``filt_ok (T,)``.
    """
    T, m = hn.shape
    if eps is None:
        eps = jnp.zeros((T, m))
    I = jnp.eye(m)

    def forward(carry, xs):
        Jp, hp, lz = carry
        Jn_t, hn_t, J11_t, J21_t, J22_t = xs
        Jf = Jp + Jn_t
        hf = hp + hn_t
        L = jnp.linalg.cholesky(Jf + J11_t)
        Minv_hf = cho_solve((L, True), hf)
        Minv_J21T = cho_solve((L, True), J21_t.T)
        Jp_next = _sym(J22_t - J21_t @ Minv_J21T)
        hp_next = -J21_t @ Minv_hf
        lz = lz + 0.5 * hf @ Minv_hf - jnp.sum(jnp.log(jnp.diag(L))) + 0.5 * m * LOG2PI
        ok = jnp.all(jnp.isfinite(L))
        return (Jp_next, hp_next, lz), (Jf, hf, ok)

    (Jp, hp, lz), (Jfs, hfs, oks) = lax.scan(
        forward, (J0, h0, jnp.zeros((), hn.dtype)), (Jn[:-1], hn[:-1], J11, J21, J22)
    )
    JfT = _sym(Jp + Jn[-1])
    hfT = hp + hn[-1]
    LT = jnp.linalg.cholesky(JfT)
    muT = cho_solve((LT, True), hfT)
    SigT = cho_solve((LT, True), I)
    lz = lz + 0.5 * hfT @ muT - jnp.sum(jnp.log(jnp.diag(LT))) + 0.5 * m * LOG2PI
    xT = muT + solve_triangular(LT.T, eps[-1], lower=False)
    filt_ok = jnp.concatenate([oks, jnp.all(jnp.isfinite(LT))[None]])

    def backward(carry, xs):
        mu_n, Sig_n, x_n = carry
        Jf, hf, J11_t, J21_t, e = xs
        L = jnp.linalg.cholesky(Jf + J11_t)
        G = -cho_solve((L, True), J21_t.T)
        c = cho_solve((L, True), hf)
        mu = G @ mu_n + c
        Sig = _sym(cho_solve((L, True), I) + G @ Sig_n @ G.T)
        cc = G @ Sig_n
        x = G @ x_n + c + solve_triangular(L.T, e, lower=False)
        return (mu, Sig, x), (mu, Sig, cc, x)

    _, (mus, Sigs, ccs, xs) = lax.scan(backward, (muT, SigT, xT), (Jfs, hfs, J11, J21, eps[:-1]), reverse=True)
    mean = jnp.concatenate([mus, muT[None]])
    cov = jnp.concatenate([Sigs, SigT[None]])
    cross = jnp.swapaxes(ccs, -1, -2) + mean[1:, :, None] * mean[:-1, None, :]
    sample = jnp.concatenate([xs, xT[None]])
    return dict(mean=mean, cov=cov, cross=cross, log_z=lz, sample=sample, filt_ok=filt_ok)


def _chain_from_stats(s_init, s_dyn, pot, T):
    m = pot.h.shape[1]
    h0, J0, c0 = niw_node(s_init, m)
    J11, J21, J22, cdyn = mniw_pair(s_dyn, m)
    if J11.ndim == 2:
        J11, J21, J22 = (jnp.broadcast_to(a, (T - 1, m, m)) for a in (J11, J21, J22))
        cdyn = jnp.broadcast_to(cdyn, (T - 1,))
    return dict(J0=J0, h0=h0, J11=J11, J21=J21, J22=J22, Jn=pot.J, hn=pot.h), c0, cdyn


def _lds_core(s_init, s_dyn, pot, eps):
    T, m = pot.h.shape
    chain, c0, cdyn = _chain_from_stats(s_init, s_dyn, pot, T)
    out = info_kalman(**chain, eps=eps)
    mean, cov, cross = out["mean"], out["cov"], out["cross"]
    pstats = _pair_stats(mean, cov, cross)
    surrogate = out["log_z"] + c0 + jnp.sum(cdyn) - 0.5 * T * m * LOG2PI
    e_psi = pot.expected(mean, cov)
    stats = dict(init_x=_node_stats(mean[0], cov[0]), dyn=jnp.concatenate([pstats, jnp.ones((T - 1, 1))], 1))
    return out, chain, pstats, surrogate, e_psi, stats


def _lds_local(s, pot, eps=None):
    out, chain, _, surrogate, e_psi, stats = _lds_core(s["init_x"], s["dyn"], pot, eps)
    stats = dict(init_x=stats["init_x"], dyn=jnp.sum(stats["dyn"], 0))
    return LocalPosterior(
        kind="lds",
        mean=out["mean"],
        cov=out["cov"],
        cross=out["cross"],
        x_sample=out["sample"],
        log_z=out["log_z"],
        kl=e_psi - surrogate,
        surrogate=surrogate,
        stats=stats,
        eta_x=chain,
        filt_ok=out["filt_ok"],
    )


def _check_finite(name, a):
    a = np.asarray(a)
    if np.any(np.isnan(a)) or np.any(np.isposinf(a)):
        raise InputError(f"{name} contains NaN or +inf")


def _check_pot(pot):
    _check_finite("potential h", pot.h)
    _check_finite("potential precision", pot.prec)
    if np.any(np.isinf(np.asarray(pot.h))):
        raise InputError("potential h contains inf")
    if np.any(np.asarray(pot.prec) < 0):
        raise UsageError("potential precisions must be >= 0")


def _raise_on_filter(filt_ok):
    ok = np.asarray(filt_ok)
    if not ok.all():
        frame = int(np.argmin(ok))
        raise NumericalError(f"filtering precision lost positive definiteness at frame {frame}")


def kalman_smoother(globals: GlobalExpectedStats, pot: EvidencePotentials, eps=None) -> LocalPosterior:
    """q*(x) for an LDS: chain factors from expected dynamics, unary factors
    from the recognition potentials.  ``eps`` (T, m) drives the joint sample."""
    _check_pot(pot)
    eps = None if eps is None else jnp.asarray(eps)
    q = jax.jit(_lds_local)(globals, pot, eps)
    _raise_on_filter(q.filt_ok)
    return q


# ---------------------------------------------------------------------------
# discrete chain


def _hmm_core(log_init, log_trans, log_likes, u=None):
    T, K = log_likes.shape
    lt = jnp.broadcast_to(log_trans, (T - 1, K, K))

    def fwd(a, xs):
        lt_t, ll = xs
        a = ll + logsumexp(a[:, None] + lt_t, axis=0)
        return a, a

    a0 = log_init + log_likes[0]
    _, alphas = lax.scan(fwd, a0, (lt, log_likes[1:]))
    alphas = jnp.concatenate([a0[None], alphas])
    log_z = logsumexp(alphas[-1])

    def bwd(b, xs):
        lt_t, ll = xs
        b = logsumexp(lt_t + (ll + b)[None, :], axis=1)
        return b, b

    _, betas = lax.scan(bwd, jnp.zeros(K, log_likes.dtype), (lt, log_likes[1:]), reverse=True)
    betas = jnp.concatenate([betas, jnp.zeros((1, K), log_likes.dtype)])
    unary = jnp.exp(alphas + betas - log_z)
    pair = jnp.exp(alphas[:-1, :, None] + lt + (log_likes[1:] + betas[1:])[:, None, :] - log_z)

    sample = None
    if u is not None:

        def draw(logp, v):
            c = jnp.cumsum(jax.nn.softmax(logp))
            return jnp.minimum(jnp.searchsorted(c, v), K - 1)

        zT = draw(alphas[-1], u[-1])

        def back(z_next, xs):
            a, lt_t, v = xs
            z = draw(a + lt_t[:, z_next], v)
            return z, z

        _, zs = lax.scan(back, zT, (alphas[:-1], lt, u[:-1]), reverse=True)
        sample = jnp.concatenate([zs, zT[None]])
    return dict(unary=unary, pair=pair, log_z=log_z, sample=sample)


def hmm_forward_backward(log_init, log_trans, log_likes, u=None) -> LocalPosterior:
    """Log-space forward-backward: exact unary and pairwise marginals and the
    log partition.  ``log_trans`` is (K, K) or time-varying (T-1, K, K);
    ``-inf`` entries encode forbidden moves.  ``u`` (T,) uniforms give a
    backward-sampled path."""
    log_init = jnp.asarray(log_init, dtype=float)
    log_trans = jnp.asarray(log_trans, dtype=float)
    log_likes = jnp.asarray(log_likes, dtype=float)
    for name, a in (("log_init", log_init), ("log_trans", log_trans), ("log_likes", log_likes)):
        _check_finite(name, a)
    rows = np.asarray(logsumexp(log_trans, axis=-1))
    if np.any(np.abs(rows) > 1e-9):
        raise UsageError("transition rows must normalize (log-sum-exp 0 +/- 1e-9)")
    out = jax.jit(_hmm_core)(log_init, log_trans, log_likes, None if u is None else jnp.asarray(u))
    T, K = log_likes.shape
    return LocalPosterior(
        kind="hmm",
        mean=None,
        cov=None,
        z_marginals=out["unary"],
        z_pairwise=out["pair"],
        z_sample=out["sample"],
        log_z=out["log_z"],
        eta_z=dict(log_init=log_init, log_trans=log_trans, log_likes=log_likes),
    )


# ---------------------------------------------------------------------------
# mixture model


def _gaussian_entropy(L):
    m = L.shape[-1]
    return -jnp.sum(jnp.log(jnp.diag(L))) + 0.5 * m * (1.0 + LOG2PI)


def _gmm_datum(log_pi, s_niw, h_pot, prec_pot, eps, tol, max_iters):
    K = log_pi.shape[0]
    m = h_pot.shape[0]
    hk, Jk, ck = niw_node(s_niw, m)
    base = log_pi + ck - 0.5 * m * LOG2PI

    def x_update(r):
        J = jnp.einsum("k,kij->ij", r, Jk) + jnp.diag(prec_pot)
        h = r @ hk + h_pot
        L = jnp.linalg.cholesky(J)
        mu = cho_solve((L, True), h)
        Sigma = cho_solve((L, True), jnp.eye(m))
        return h, J, L, mu, Sigma

    def comp_ll(mu, Sigma):
        S = Sigma + jnp.outer(mu, mu)
        return base + hk @ mu - 0.5 * jnp.einsum("kij,ij->k", Jk, S)

    def objective(r, L, mu, Sigma):
        S_diag = jnp.diag(Sigma) + mu**2
        e_psi = h_pot @ mu - 0.5 * prec_pot @ S_diag
        ent_z = -jnp.sum(jnp.where(r > 0, r * jnp.log(jnp.where(r > 0, r, 1.0)), 0.0))
        return r @ comp_ll(mu, Sigma) + e_psi + ent_z + _gaussian_entropy(L), e_psi

    def iterate(state, _):
        r, obj, done, n = state
        _, _, L, mu, Sigma = x_update(r)
        obj_x, _ = objective(r, L, mu, Sigma)
        r_new = jax.nn.softmax(comp_ll(mu, Sigma))
        obj_z, _ = objective(r_new, L, mu, Sigma)
        # tol <= 0 runs the full max_iters (used by finite-difference checks)
        converged = (tol > 0) & ((obj_z - obj) < tol * jnp.maximum(1.0, jnp.abs(obj)))
        r_out = jnp.where(done, r, r_new)
        obj_out = jnp.where(done, obj, obj_z)
        trace = jnp.where(done, jnp.array([jnp.nan, jnp.nan]), jnp.stack([obj_x, obj_z]))
        return (r_out, obj_out, done | converged, n + jnp.where(done, 0, 1)), trace

    r0 = jnp.full(K, 1.0 / K)
    (r, obj, _, n), trace = lax.scan(iterate, (r0, -jnp.inf, False, 0), None, length=max_iters)
    # final q(x) consistent with the returned responsibilities
    h, J, L, mu, Sigma = x_update(r)
    surrogate, e_psi = objective(r, L, mu, Sigma)
    x_hat = mu + solve_triangular(L.T, eps, lower=False)
    node = _node_stats(mu, Sigma)
    stats = dict(pi=r, niw=r[:, None] * node[None, :])
    return dict(
        mean=mu, cov=Sigma, r=r, x_hat=x_hat, surrogate=surrogate, kl=e_psi - surrogate,
        stats=stats, trace=trace.ravel(), n=n, h=h, J=J,
        log_z=0.5 * h @ mu - jnp.sum(jnp.log(jnp.diag(L))) + 0.5 * m * LOG2PI,
    )


def _gmm_local(s, pot, eps, tol, max_iters):
    B, m = pot.h.shape
    if eps is None:
        eps = jnp.zeros((B, m))
    fn = jax.vmap(partial(_gmm_datum, tol=tol, max_iters=max_iters), in_axes=(None, None, 0, 0, 0))
    out = fn(s["pi"], s["niw"], pot.h, pot.prec, eps)
    return LocalPosterior(
        kind="gmm",
        mean=out["mean"],
        cov=out["cov"],
        z_marginals=out["r"],
        x_sample=out["x_hat"],
        log_z=out["log_z"],
        kl=out["kl"],
        surrogate=out["surrogate"],
        stats=jax.tree_util.tree_map(lambda a: jnp.sum(a, 0), out["stats"]),
        trace=out["trace"],
        n_iters=out["n"],
        eta_x=dict(h=out["h"], J=out["J"]),
    )


def gmm_local_ascent(globals: GlobalExpectedStats, pot: EvidencePotentials, tol=1e-8, max_iters=50, eps=None):
    """Block coordinate ascent on q(z_n) q(x_n) for each datum.

    Starts from uniform responsibilities, updates q(x) then q(z) each
    iteration, and stops once the surrogate improves by less than ``tol``
    (relative) or after ``max_iters`` iterations.  ``trace`` records the
    surrogate after every half-update (NaN once converged).
    """
    _check_pot(pot)
    q = jax.jit(_gmm_local, static_argnums=(4,))(globals, pot, None if eps is None else jnp.asarray(eps), tol, int(max_iters))
    bad = ~np.isfinite(np.asarray(q.log_z))
    if bad.any():
        raise NumericalError(f"combined precision not positive definite for datum {int(np.argmax(bad))}")
    return q


# ---------------------------------------------------------------------------
# switching LDS


def _slds_local(s, pot, eps, u, tol, max_iters):
    T, m = pot.h.shape
    K = s["init_z"].shape[0]
    s_dyn = s["dyn"]
    e_psi_fn = pot.expected

    def x_update(w):
        s_mix = w[1:] @ s_dyn
        return s_mix, _lds_core(s["init_x"], s_mix, pot, eps)

    def z_update(pstats):
        ll = jnp.concatenate([jnp.zeros((1, K)), pstats @ s_dyn[:, :-1].T + s_dyn[:, -1]], 0)
        return ll, _hmm_core(s["init_z"], s["trans"], ll, u)

    def e_log_qz_of(hm, ll):
        w, xi = hm["unary"], hm["pair"]
        return w[0] @ s["init_z"] + jnp.sum(xi * s["trans"]) + jnp.sum(w * ll) - hm["log_z"]

    def objective(w, xi, e_log_qz, s_mix, out, pstats, e_psi):
        mean, cov = out["mean"], out["cov"]
        e_log_pz = w[0] @ s["init_z"] + jnp.sum(xi * s["trans"])
        h0, J0, c0 = niw_node(s["init_x"], m)
        second0 = cov[0] + jnp.outer(mean[0], mean[0])
        e_init = h0 @ mean[0] - 0.5 * jnp.sum(J0 * second0) + c0
        e_dyn = jnp.sum(w[1:] * (pstats @ s_dyn[:, :-1].T + s_dyn[:, -1]))
        e_log_px = e_init + e_dyn - 0.5 * T * m * LOG2PI
        # E log q(x) = <eta_x, E t_x> - log Z_x, eta_x built from s_mix
        e_log_qx = e_init - c0 + jnp.sum(pstats * s_mix[:, :-1]) + e_psi - out["log_z"]
        return e_log_pz + e_log_px + e_psi - e_log_qz - e_log_qx

    w0 = jnp.full((T, K), 1.0 / K)
    xi0 = jnp.full((T - 1, K, K), 1.0 / K**2)
    ll0 = jnp.zeros((T, K))
    logzz0 = jnp.log(float(K)) * T

    def iterate(state, _):
        w, xi, ll, log_z_z, e_log_qz, obj, done, n = state
        s_mix, (out, _, pstats, _, e_psi, _) = x_update(w)
        obj_x = objective(w, xi, e_log_qz, s_mix, out, pstats, e_psi)
        ll_new, hm = z_update(pstats)
        e_log_qz_new = e_log_qz_of(hm, ll_new)
        obj_z = objective(hm["unary"], hm["pair"], e_log_qz_new, s_mix, out, pstats, e_psi)
        # tol <= 0 runs the full max_iters (used by finite-difference checks)
        converged = (tol > 0) & ((obj_z - obj) < tol * jnp.maximum(1.0, jnp.abs(obj)))
        keep = lambda old, new: jnp.where(done, old, new)  # noqa: E731
        new_state = (
            keep(w, hm["unary"]), keep(xi, hm["pair"]), keep(ll, ll_new), keep(log_z_z, hm["log_z"]),
            keep(e_log_qz, e_log_qz_new), keep(obj, obj_z), done | converged, n + jnp.where(done, 0, 1),
        )
        trace = jnp.where(done, jnp.array([jnp.nan, jnp.nan]), jnp.stack([obj_x, obj_z]))
        return new_state, trace

    init = (w0, xi0, ll0, logzz0, -logzz0, -jnp.inf, False, 0)
    (w, xi, ll, log_z_z, e_log_qz, _, _, n), trace = lax.scan(iterate, init, None, length=max_iters)
    s_mix, (out, chain, pstats, _, e_psi, xstats) = x_update(w)
    surrogate = objective(w, xi, e_log_qz, s_mix, out, pstats, e_psi)
    z_sample = None
    if u is not None:
        z_sample = _hmm_core(s["init_z"], s["trans"], ll, u)["sample"]
    stats = dict(
        init_z=w[0],
        trans=jnp.sum(xi, 0),
        init_x=xstats["init_x"],
        dyn=w[1:].T @ jnp.concatenate([pstats, jnp.ones((T - 1, 1))], 1),
    )
    return LocalPosterior(
        kind="slds",
        mean=out["mean"],
        cov=out["cov"],
        cross=out["cross"],
        z_marginals=w,
        z_pairwise=xi,
        x_sample=out["sample"],
        z_sample=z_sample,
        log_z=out["log_z"],
        kl=e_psi - surrogate,
        surrogate=surrogate,
        stats=stats,
        trace=trace.ravel(),
        n_iters=n,
        eta_x=chain,
        eta_z=dict(log_init=s["init_z"], log_trans=s["trans"], log_likes=ll, log_z=log_z_z),
        filt_ok=out["filt_ok"],
    )


def slds_structured_meanfield(
    globals: GlobalExpectedStats, pot: EvidencePotentials, tol=1e-8, max_iters=50, eps=None, u=None
) -> LocalPosterior:
    """Structured mean field q(z) q(x) for a switching LDS.

    Alternates an x-update (Kalman smoothing with dynamics mixed under the
    current marginals of z_t) and a z-update (forward-backward with per-frame
    evidence from the expected pairwise statistics of x), starting from
    uniform q(z).
    """
    _check_pot(pot)
    eps = None if eps is None else jnp.asarray(eps)
    u = None if u is None else jnp.asarray(u)
    q = jax.jit(_slds_local, static_argnums=(5,))(globals, pot, eps, u, tol, int(max_iters))
    _raise_on_filter(q.filt_ok)
    return q


# ---------------------------------------------------------------------------
# standard-normal latent (VAE baseline)


def _gaussian_prior_local(pot, eps):
    B, m = pot.h.shape
    if eps is None:
        eps = jnp.zeros((B, m))
    prec = 1.0 + pot.prec
    var = 1.0 / prec
    mean = pot.h * var
    x_hat = mean + jnp.sqrt(var) * eps
    # KL(N(mean, var) || N(0, 1)) per datum
    kl = 0.5 * jnp.sum(var + mean**2 - 1.0 - jnp.log(var), axis=1)
    cov = jnp.vectorize(jnp.diag, signature="(m)->(m,m)")(var)
    return LocalPosterior(kind="vae", mean=mean, cov=cov, x_sample=x_hat, kl=kl, stats={})


# ---------------------------------------------------------------------------
# local KL from stored natural parameters


def _chain_energy(eta, mean, cov, cross):
    """<eta_x, E t_x> for a Gaussian chain."""
    second = cov + mean[:, :, None] * mean[:, None, :]
    e = eta["h0"] @ mean[0] - 0.5 * jnp.sum(eta["J0"] * second[0])
    e += jnp.sum(eta["hn"] * mean) - 0.5 * jnp.sum(eta["Jn"] * second)
    e += -0.5 * jnp.sum(eta["J22"] * second[1:]) - jnp.sum(eta["J21"] * cross) - 0.5 * jnp.sum(eta["J11"] * second[:-1])
    return e


def local_kl(q: LocalPosterior, globals: GlobalExpectedStats):
    """E_{q(theta)} KL(q*(local) || p(local | theta)), recomputed from the
    stored natural parameters and moments of q and the expected globals.

    Returns a scalar for sequences and a per-datum array for mixtures."""
    if q.kind == "gmm":
        m = q.mean.shape[-1]
        hk, Jk, ck = niw_node(globals["niw"], m)
        second = q.cov + q.mean[:, :, None] * q.mean[:, None, :]
        e_log_qx = jnp.einsum("bi,bi->b", q.eta_x["h"], q.mean) - 0.5 * jnp.einsum("bij,bij->b", q.eta_x["J"], second) - q.log_z
        r = q.z_marginals
        e_log_qz = jnp.sum(jnp.where(r > 0, r * jnp.log(jnp.where(r > 0, r, 1.0)), 0.0), axis=1)
        comp = (
            globals["pi"][None, :]
            + q.mean @ hk.T
            - 0.5 * jnp.einsum("kij,bij->bk", Jk, second)
            + ck[None, :]
            - 0.5 * m * LOG2PI
        )
        e_log_p = jnp.sum(r * comp, axis=1)
        return e_log_qx + e_log_qz - e_log_p
    if q.kind in ("lds", "slds"):
        T, m = q.mean.shape
        e_log_qx = _chain_energy(q.eta_x, q.mean, q.cov, q.cross) - q.log_z
        h0, J0, c0 = niw_node(globals["init_x"], m)
        second0 = q.cov[0] + jnp.outer(q.mean[0], q.mean[0])
        e_init = h0 @ q.mean[0] - 0.5 * jnp.sum(J0 * second0) + c0
        pstats = _pair_stats(q.mean, q.cov, q.cross)
        s_dyn = globals["dyn"]
        if q.kind == "lds":
            e_dyn = jnp.sum(pstats @ s_dyn[:-1] + s_dyn[-1])
            return e_log_qx - (e_init + e_dyn - 0.5 * T * m * LOG2PI)
        w, xi = q.z_marginals, q.z_pairwise
        e_dyn = jnp.sum(w[1:] * (pstats @ s_dyn[:, :-1].T + s_dyn[:, -1]))
        e_log_pz = w[0] @ globals["init_z"] + jnp.sum(xi * globals["trans"])
        ez = q.eta_z
        e_log_qz = w[0] @ ez["log_init"] + jnp.sum(xi * ez["log_trans"]) + jnp.sum(w * ez["log_likes"]) - ez["log_z"]
        return e_log_qx + e_log_qz - (e_init + e_dyn - 0.5 * T * m * LOG2PI) - e_log_pz
    if q.kind == "vae":
        return q.kl
    raise UsageError(f"local_kl does not apply to {q.kind!r} posteriors")
