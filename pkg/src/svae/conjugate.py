"""Dense closed forms for the linear-Gaussian LDS wired as an SVAE.

When the decoder is ``y = C x + noise(R)`` the model is conjugate, so the
optimal mean field factor over x, the optimal bound and the conjugate
(coordinate ascent) update are all available in closed form.  Everything
here builds the full (T m) x (T m) joint precision with numpy and never
touches the message passing code, so it serves as an independent reference.
"""

from __future__ import annotations

import numpy as np

from svae import expfam as ef
from svae.core import EstimatorConfig, Noise, svae_bound
from svae.errors import UsageError
from svae.expfam import LOG2PI


def linear_gaussian_parts(model):
    """(C, R) if ``model`` is the linear-Gaussian LDS, else raise UsageError."""
    m = model.m
    if (
        model.structure != "lds"
        or model.p != m
        or model.dec_spec.widths != (m, m)
        or model.enc_spec.widths != (m, m)
        or model.dec_spec.nonlinearity != "identity"
        or model.enc_spec.nonlinearity != "identity"
        or model.gamma_factor != "delta"
    ):
        raise UsageError("closed forms need the linear-Gaussian LDS (identity single-layer networks, p == m)")
    g = np.asarray(model.gamma)
    W = g[: 2 * m * m].reshape(m, 2 * m)
    b = g[2 * m * m :]
    C = W[:, :m].T
    if np.any(W[:, m:] != 0) or np.any(b[:m] != 0) or np.any(C != np.diag(np.diag(C))):
        raise UsageError("decoder must be y = C x + noise with diagonal C and constant variance")
    return np.diag(C), np.exp(b[m:])


def _prior_chain(s_init, s_dyn, m):
    h0 = s_init[:m]
    J0 = -2.0 * s_init[m : m + m * m].reshape(m, m)
    c0 = s_init[-2] + s_init[-1]
    S1, S2, S3 = (s_dyn[i * m * m : (i + 1) * m * m].reshape(m, m) for i in range(3))
    J0 = 0.5 * (J0 + J0.T)
    return h0, J0, c0, -2.0 * 0.5 * (S1 + S1.T), -S2, -2.0 * 0.5 * (S3 + S3.T), s_dyn[-1]


def dense_joint(model, y):
    """Precision P, linear term b and constant c with
    E_q(theta) log p(x | theta) + log p(y | x) = -x^T P x / 2 + b^T x + c."""
    C, R = linear_gaussian_parts(model)
    y = np.asarray(y, float)
    T, m = y.shape
    s = {k: np.asarray(v) for k, v in model.expected_globals().items()}
    h0, J0, c0, J22, J21, J11, cdyn = _prior_chain(s["init_x"], s["dyn"], m)
    P = np.zeros((T * m, T * m))
    b = np.zeros(T * m)
    blk = lambda t: slice(t * m, (t + 1) * m)  # noqa: E731
    P[blk(0), blk(0)] += J0
    b[blk(0)] += h0
    for t in range(T - 1):
        P[blk(t), blk(t)] += J11
        P[blk(t + 1), blk(t + 1)] += J22
        P[blk(t + 1), blk(t)] += J21
        P[blk(t), blk(t + 1)] += J21.T
    lik_prec = C**2 / R
    for t in range(T):
        P[blk(t), blk(t)] += np.diag(lik_prec)
        b[blk(t)] += C * y[t] / R
    c = c0 + (T - 1) * cdyn - 0.5 * T * m * LOG2PI
    c += np.sum(-0.5 * LOG2PI - 0.5 * np.log(R) - 0.5 * y**2 / R)
    return P, b, c


def optimal_local(model, y):
    """Mean (T, m) and joint covariance of the exact optimal q(x), plus log of
    the integral of the joint (the optimal local objective)."""
    P, b, c = dense_joint(model, y)
    Sigma = np.linalg.inv(P)
    mu = Sigma @ b
    _, logdet = np.linalg.slogdet(P)
    log_int = 0.5 * b @ mu - 0.5 * logdet + 0.5 * P.shape[0] * LOG2PI + c
    return mu.reshape(np.shape(y)), Sigma, log_int


def kl_globals(model):
    return sum(float(np.sum(ef.kl_divergence(model.eta[k], model.prior[k]))) for k in model.eta)


def meanfield_optimum(model, data):
    """Optimal mean field bound over q(x) for fixed q(theta), summed over the
    sequences in ``data`` ((T, m) or (S, T, m)), minus KL(q(theta) || p(theta))."""
    data = np.asarray(data, float)
    seqs = data[None] if data.ndim == 2 else data
    return sum(optimal_local(model, y)[2] for y in seqs) - kl_globals(model)


def expected_conjugate_stats(model, data):
    """E_q*(x)[(t_x, 1)] in the (init_x, dyn) layout, summed over sequences."""
    data = np.asarray(data, float)
    seqs = data[None] if data.ndim == 2 else data
    m = model.m
    tot = None
    for y in seqs:
        T = y.shape[0]
        mu, Sigma, _ = optimal_local(model, y)
        blk = lambda t: slice(t * m, (t + 1) * m)  # noqa: E731
        second = lambda a, c: Sigma[blk(a), blk(c)] + np.outer(mu[a], mu[c])  # noqa: E731
        init = np.concatenate([mu[0], second(0, 0).ravel(), [1.0, 1.0]])
        dyn = np.zeros(3 * m * m + 1)
        for t in range(T - 1):
            dyn += np.concatenate([second(t + 1, t + 1).ravel(), second(t + 1, t).ravel(), second(t, t).ravel(), [1.0]])
        st = dict(init_x=init, dyn=dyn)
        tot = st if tot is None else {k: tot[k] + st[k] for k in st}
    return tot


def svi_natural_gradient(model, data, scale=1.0):
    """eta0 + scale * E_q*(x)[(t_x, 1)] - eta, the conjugate natural gradient."""
    st = expected_conjugate_stats(model, data)
    return {k: np.asarray(model.prior[k].data) + scale * st[k] - np.asarray(model.eta[k].data) for k in st}


def conjugate_update(model, data, scale=1.0):
    """The coordinate-ascent update of q(theta): eta0 + scale * E[(t_x, 1)]."""
    st = expected_conjugate_stats(model, data)
    eta = {
        k: ef.NaturalParameters(e.family, e.dims, np.asarray(model.prior[k].data) + scale * st[k])
        for k, e in model.eta.items()
    }
    return model.replace(eta=eta)


def svae_bound_exactness_check(model, data):
    """(L_svae, L_meanfield_opt) for the linear-Gaussian LDS.

    L_svae uses the closed-form expected reconstruction so it is
    deterministic.  Both values leave out the decoder prior term, which is
    common to the two objectives.
    """
    linear_gaussian_parts(model)
    data = np.asarray(data, float)
    seqs = data[None] if data.ndim == 2 else data
    cfg = EstimatorConfig(recon="expected")
    total = 0.0
    kl_global = None
    for y in seqs:
        noise = Noise(np.zeros((1,) + y.shape))
        rep = svae_bound(model, y, noise, cfg, scale=1.0)
        total += rep.recon - rep.kl_local
        kl_global = rep.kl_global
    return total - kl_global, meanfield_optimum(model, seqs)
