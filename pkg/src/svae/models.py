"""Model constructors, forecasting, clustering and the plain-GMM baseline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import jax.numpy as jnp
import numpy as np
from scipy.special import logsumexp as np_logsumexp

from svae import expfam as ef
from svae import inference as inf
from svae import nn
from svae.core import GLOBAL_KEYS, SEQUENTIAL, EstimatorConfig, SvaeModel
from svae.errors import ConfigError, UsageError


@dataclass(frozen=True)
class ModelConfig:
    """Structure, sizes and prior hyperparameters.

    ``niw_nu``/``mniw_nu`` default to ``m + 2``.  The dynamics prior is
    centred on ``mniw_a * I``.  ``init_spread`` sets the scale of the random
    component means that break symmetry between mixture components and
    ``init_cov`` their initial expected covariance.
    """

    structure: str = "gmm"
    K: int = 5
    m: int = 2
    p: int = 2
    enc_hidden: tuple = (50,)
    dec_hidden: tuple = (50,)
    nonlinearity: str = "tanh"
    alpha: float = 1.0
    trans_alpha: float = 1.0
    trans_sticky: float = 0.0
    niw_kappa: float = 0.05
    niw_psi: float = 1.0
    niw_nu: Optional[float] = None
    mniw_a: float = 0.9
    mniw_k: float = 1.0
    mniw_psi: float = 1.0
    mniw_nu: Optional[float] = None
    gamma_factor: str = "delta"
    gamma_prior_var: float = 1.0
    init_spread: float = 1.0
    init_cov: float = 1.0
    N: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "enc_hidden", tuple(int(w) for w in self.enc_hidden))
        object.__setattr__(self, "dec_hidden", tuple(int(w) for w in self.dec_hidden))
        if self.structure not in GLOBAL_KEYS:
            raise ConfigError(f"unknown structure {self.structure!r}")
        if self.K < 1 or self.m < 1 or self.p < 1 or self.N < 1:
            raise ConfigError("K, m, p and N must all be >= 1")
        if min(self.alpha, self.trans_alpha, self.niw_kappa, self.niw_psi, self.mniw_k, self.mniw_psi) <= 0:
            raise ConfigError("prior concentrations and scales must be > 0")
        if self.trans_sticky < 0:
            raise ConfigError("trans_sticky must be >= 0")
        if self.niw_nu is not None and self.niw_nu <= self.m - 1:
            raise ConfigError(f"niw_nu must exceed m - 1 = {self.m - 1}")
        if self.mniw_nu is not None and self.mniw_nu <= self.m - 1:
            raise ConfigError(f"mniw_nu must exceed m - 1 = {self.m - 1}")
        if self.gamma_prior_var <= 0 or self.init_cov <= 0 or self.init_spread < 0:
            raise ConfigError("gamma_prior_var and init_cov must be > 0, init_spread >= 0")

    @property
    def enc_spec(self):
        return nn.MlpSpec((self.p,) + self.enc_hidden + (self.m,), self.nonlinearity, "potential")

    @property
    def dec_spec(self):
        return nn.MlpSpec((self.m,) + self.dec_hidden + (self.p,), self.nonlinearity, "gaussian-diag")


def _niw_prior(cfg, mu0=None):
    m = cfg.m
    nu = cfg.niw_nu if cfg.niw_nu is not None else m + 2.0
    mu0 = np.zeros(m) if mu0 is None else mu0
    return ef.niw(mu0, cfg.niw_kappa, cfg.niw_psi * np.eye(m), nu)


def _mniw_prior(cfg, M=None):
    m = cfg.m
    nu = cfg.mniw_nu if cfg.mniw_nu is not None else m + 2.0
    M = cfg.mniw_a * np.eye(m) if M is None else M
    return ef.mniw(M, cfg.mniw_k * np.eye(m), cfg.mniw_psi * np.eye(m), nu)


def priors(cfg: ModelConfig) -> dict:
    K = cfg.K
    if cfg.structure == "gmm":
        return dict(pi=ef.dirichlet(np.full(K, cfg.alpha)), niw=ef.stack([_niw_prior(cfg)] * K))
    if cfg.structure == "lds":
        return dict(init_x=_niw_prior(cfg), dyn=_mniw_prior(cfg))
    if cfg.structure == "slds":
        trans = np.full((K, K), cfg.trans_alpha) + cfg.trans_sticky * np.eye(K)
        return dict(
            init_z=ef.dirichlet(np.full(K, cfg.alpha)),
            trans=ef.dirichlet(trans),
            init_x=_niw_prior(cfg),
            dyn=ef.stack([_mniw_prior(cfg)] * K),
        )
    return {}


def _initial_globals(cfg, prior, rng):
    """Prior plus a seeded perturbation that keeps every factor proper."""
    K, m = cfg.K, cfg.m
    if cfg.structure == "gmm":
        means = cfg.init_spread * rng.standard_normal((K, m))
        nu = cfg.niw_nu if cfg.niw_nu is not None else m + 2.0
        psi = cfg.init_cov * (nu - m - 1) * np.eye(m)
        niw = ef.stack([ef.niw(means[k], 1.0, psi, nu) for k in range(K)])
        pi = ef.dirichlet(1.0 + 0.1 * rng.uniform(size=K))
        return dict(pi=pi, niw=niw)
    if cfg.structure == "lds":
        M = cfg.mniw_a * np.eye(m) + 0.01 * rng.standard_normal((m, m))
        return dict(init_x=prior["init_x"], dyn=_mniw_prior(cfg, M))
    if cfg.structure == "slds":
        dyn = ef.stack([_mniw_prior(cfg, cfg.mniw_a * np.eye(m) + 0.1 * rng.standard_normal((m, m))) for _ in range(K)])
        trans = ef.dirichlet(np.asarray(prior["trans"].data) * (1.0 + 0.1 * rng.uniform(size=(K, K))))
        return dict(init_z=prior["init_z"], trans=trans, init_x=prior["init_x"], dyn=dyn)
    return {}


def build(cfg: ModelConfig) -> SvaeModel:
    """Deterministic given ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    prior = priors(cfg)
    for k, p in prior.items():
        if not ef.is_proper(p):
            raise ConfigError(f"prior factor {k!r} is improper")
    eta = _initial_globals(cfg, prior, rng)
    enc = nn.init_params(cfg.enc_spec, rng)
    dec = nn.init_params(cfg.dec_spec, rng)
    return SvaeModel(
        structure=cfg.structure,
        prior=prior,
        eta=eta,
        enc_spec=cfg.enc_spec,
        phi=enc.flat,
        dec_spec=cfg.dec_spec,
        gamma=dec.flat,
        N=cfg.N,
        gamma_factor=cfg.gamma_factor,
        gamma_prior_var=cfg.gamma_prior_var,
    )


# ---------------------------------------------------------------------------
# linear-Gaussian model wired as networks


def conjugate_sanity_model(m, C_diag, R_diag, init_x, dyn, N=1, prior=None) -> SvaeModel:
    """LDS whose decoder is y = C x + noise(R) (C, R diagonal) and whose
    recognition network returns the exact log-likelihood potential
    (h = C R^-1 y, precision = C^2 / R) for every frame."""
    C = np.asarray(C_diag, float)
    R = np.asarray(R_diag, float)
    enc_spec = nn.MlpSpec((m, m), "identity", "potential")
    dec_spec = nn.MlpSpec((m, m), "identity", "gaussian-diag")
    W_enc = np.zeros((m, 2 * m))
    W_enc[:, :m] = np.diag(C / R)
    b_enc = np.concatenate([np.zeros(m), np.log(C**2 / R)])
    W_dec = np.zeros((m, 2 * m))
    W_dec[:, :m] = np.diag(C)
    b_dec = np.concatenate([np.zeros(m), np.log(R)])
    eta = dict(init_x=init_x, dyn=dyn)
    return SvaeModel(
        structure="lds",
        prior=dict(eta) if prior is None else prior,
        eta=eta,
        enc_spec=enc_spec,
        phi=jnp.asarray(np.concatenate([W_enc.ravel(), b_enc])),
        dec_spec=dec_spec,
        gamma=jnp.asarray(np.concatenate([W_dec.ravel(), b_dec])),
        N=N,
    )


# ---------------------------------------------------------------------------
# forecasting


@dataclass(frozen=True)
class ForecastRequest:
    prefix: np.ndarray
    horizon: int = 1
    n_samples: int = 1
    noiseless: bool = False
    seeds: Optional[tuple] = None

    def __post_init__(self):
        if self.horizon < 1 or self.n_samples < 1:
            raise UsageError("horizon and n_samples must be >= 1")
        if self.seeds is not None and len(self.seeds) != self.n_samples:
            raise UsageError("one seed per rollout is required")


@dataclass(frozen=True)
class Forecast:
    frames: np.ndarray  # (S, H, p) decoded future frames
    latents: np.ndarray  # (S, H, m)
    states: Optional[np.ndarray] = None  # (S, H) discrete states (SLDS)
    prefix_means: np.ndarray = field(default=None)  # (T0, m) smoothed prefix latents


def _decode(model, x, noiseless, rng):
    mean, log_var = nn.forward_gaussian(model.gamma, model.dec_spec, x)
    mean, log_var = np.asarray(mean), np.asarray(log_var)
    if noiseless:
        return mean
    return mean + np.exp(0.5 * log_var) * rng.standard_normal(mean.shape)


def _extended_potentials(model, prefix, H):
    pot = nn.recognition_potentials(model.phi, model.enc_spec, prefix)
    zeros = jnp.zeros((H, model.m))
    return inf.EvidencePotentials(jnp.concatenate([pot.h, zeros]), jnp.concatenate([pot.prec, zeros]))


def forecast(model: SvaeModel, req: ForecastRequest, rng: np.random.Generator | None = None,
             cfg: EstimatorConfig = EstimatorConfig()) -> Forecast:
    """Condition on the prefix (future frames get zero-precision potentials),
    continue the latent chain and decode.  ``noiseless`` uses posterior means
    for the latents and the decoder mean for the frames."""
    if model.structure not in SEQUENTIAL:
        raise UsageError(f"forecasting needs an lds or slds model, not {model.structure!r}")
    prefix = np.asarray(req.prefix, dtype=float)
    if prefix.ndim != 2 or prefix.shape[0] < 1:
        raise UsageError("forecast needs a nonempty (T0, p) prefix")
    T0, H, m = prefix.shape[0], req.horizon, model.m
    pot = _extended_potentials(model, prefix, H)
    s = model.expected_globals()
    rngs = [np.random.default_rng(sd) for sd in req.seeds] if req.seeds is not None else None
    rng = np.random.default_rng() if rng is None else rng

    frames, latents, states = [], [], []
    prefix_means = None
    for i in range(req.n_samples):
        r = rngs[i] if rngs is not None else rng
        if model.structure == "lds":
            eps = None if req.noiseless else r.standard_normal((T0 + H, m))
            q = inf.kalman_smoother(s, pot, eps=eps)
            x = np.asarray(q.mean if req.noiseless else q.x_sample)
            z = None
        else:
            u = r.uniform(size=T0 + H)
            q = inf.slds_structured_meanfield(s, pot, tol=cfg.local_tol, max_iters=cfg.local_iters, u=u)
            z = np.asarray(q.z_sample)
            # continuous states given the sampled discrete path
            s_path = dict(init_x=s["init_x"], dyn=s["dyn"][z[1:]])
            eps = None if req.noiseless else r.standard_normal((T0 + H, m))
            qx = inf.kalman_smoother(s_path, pot, eps=eps)
            x = np.asarray(qx.mean if req.noiseless else qx.x_sample)
        if prefix_means is None:
            prefix_means = np.asarray(q.mean[:T0])
        latents.append(x[T0:])
        frames.append(_decode(model, x[T0:], req.noiseless, r))
        if z is not None:
            states.append(z[T0:])
    return Forecast(
        frames=np.stack(frames),
        latents=np.stack(latents),
        states=np.stack(states) if states else None,
        prefix_means=prefix_means,
    )


# ---------------------------------------------------------------------------
# clustering


def cluster_assignments(model: SvaeModel, data, cfg: EstimatorConfig = EstimatorConfig()):
    """(responsibilities (N, K), hard labels (N,)) from the local mixture
    posterior at the current parameters; ties go to the lower index."""
    if model.structure != "gmm":
        raise UsageError(f"cluster assignments need a gmm model, not {model.structure!r}")
    pot = nn.recognition_potentials(model.phi, model.enc_spec, np.asarray(data, float))
    q = inf.gmm_local_ascent(model.expected_globals(), pot, tol=cfg.local_tol, max_iters=cfg.local_iters)
    r = np.asarray(q.z_marginals)
    return r, np.argmax(r, axis=1)


# ---------------------------------------------------------------------------
# plain GMM baseline: conjugate mean field directly on the observations


@dataclass(frozen=True)
class PlainGmm:
    eta: dict
    prior: dict
    n_iters: int
    elbo_trace: np.ndarray

    def point_estimate(self):
        """Posterior-mean weights, means and covariances."""
        alpha = np.asarray(self.eta["pi"].data)
        weights = alpha / alpha.sum()
        means, covs = [], []
        for k in range(alpha.shape[0]):
            mu0, _, Psi, nu = ef.niw_params(self.eta["niw"][k])
            d = mu0.shape[0]
            means.append(mu0)
            covs.append(Psi / (nu - d - 1) if nu > d + 1 else Psi / nu)
        return weights, np.stack(means), np.stack(covs)

    def log_density(self, y):
        """Per-point log density at the posterior-mean parameters."""
        w, mus, covs = self.point_estimate()
        y = np.asarray(y, float)
        comps = []
        for k in range(len(w)):
            L = np.linalg.cholesky(covs[k])
            z = np.linalg.solve(L, (y - mus[k]).T)
            comps.append(np.log(w[k]) - 0.5 * np.sum(z**2, 0) - np.sum(np.log(np.diag(L))) - 0.5 * y.shape[1] * ef.LOG2PI)
        return np_logsumexp(np.stack(comps, 1), axis=1)

    def responsibilities(self, y):
        y = np.asarray(y, float)
        s = {k: np.asarray(ef.expected_stats(v).data) for k, v in self.eta.items()}
        d = y.shape[1]
        h, J, c = (np.asarray(a) for a in inf.niw_node(jnp.asarray(s["niw"]), d))
        ll = s["pi"] + c + y @ h.T - 0.5 * np.einsum("ni,kij,nj->nk", y, J, y)
        return np.exp(ll - np_logsumexp(ll, axis=1, keepdims=True))

    def labels(self, y):
        return np.argmax(self.responsibilities(y), axis=1)


def fit_plain_gmm(y, cfg: ModelConfig, max_iters=200, tol=1e-8) -> PlainGmm:
    """Coordinate ascent on q(pi) q(mu, Sigma) q(z) with the same priors as
    the SVAE (observation dim in place of the latent dim)."""
    y = np.asarray(y, float)
    n, d = y.shape
    gcfg = ModelConfig(structure="gmm", K=cfg.K, m=d, p=d, alpha=cfg.alpha, niw_kappa=cfg.niw_kappa,
                       niw_psi=cfg.niw_psi, niw_nu=cfg.niw_nu, seed=cfg.seed)
    prior = priors(gcfg)
    rng = np.random.default_rng(cfg.seed)
    # k-means++ style seeding: each new centre drawn with probability ~ D^2
    centers = [y[rng.integers(n)]]
    for _ in range(1, cfg.K):
        d2 = np.min(((y[:, None, :] - np.asarray(centers)[None]) ** 2).sum(-1), axis=1)
        centers.append(y[rng.choice(n, p=d2 / d2.sum())] if d2.sum() > 0 else y[rng.integers(n)])
    centers = np.asarray(centers)
    d2 = ((y[:, None, :] - centers[None]) ** 2).sum(-1)
    r = np.exp(-0.5 * (d2 - d2.min(1, keepdims=True)))
    r /= r.sum(1, keepdims=True)
    t = np.concatenate([y, np.einsum("ni,nj->nij", y, y).reshape(n, d * d), np.ones((n, 2))], 1)
    trace = []
    eta = prior
    for it in range(max_iters):
        eta = dict(
            pi=ef.NaturalParameters("dirichlet", (cfg.K,), prior["pi"].data + r.sum(0)),
            niw=ef.NaturalParameters("niw", (d,), prior["niw"].data + r.T @ t),
        )
        s = {k: np.asarray(ef.expected_stats(v).data) for k, v in eta.items()}
        h, J, c = (np.asarray(a) for a in inf.niw_node(jnp.asarray(s["niw"]), d))
        ll = s["pi"] + c + y @ h.T - 0.5 * np.einsum("ni,kij,nj->nk", y, J, y) - 0.5 * d * ef.LOG2PI
        lse = np_logsumexp(ll, axis=1, keepdims=True)
        r = np.exp(ll - lse)
        kl = sum(float(np.sum(ef.kl_divergence(eta[k], prior[k]))) for k in eta)
        trace.append(float(lse.sum()) - kl)
        if it > 0 and abs(trace[-1] - trace[-2]) < tol * max(1.0, abs(trace[-1])):
            break
    return PlainGmm(eta, prior, len(trace), np.asarray(trace))
