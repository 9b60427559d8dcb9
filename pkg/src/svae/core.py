"""The SVAE bound, its gradient estimator and the training loop.

One call of :func:`svae_gradients` runs the recognition network, the local
inference routine for the model structure, the decoder, and assembles

* the Monte Carlo bound ``N/|B| * (recon - KL_local) - KL_theta - KL_gamma``,
* the natural gradient for each conjugate global factor,
  ``eta0 - eta + N/|B| * E[(t_x, 1)] + correction``, where ``correction`` is
  the gradient of ``recon - E_q[psi]`` flowing back through the local factor
  into the expected global statistics,
* reparameterization gradients for the decoder (gamma) and the recognition
  network (phi).

Networks are differentiated with the explicit rules in :mod:`svae.nn`; the
local inference routines are differentiated with ``jax.vjp``.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from functools import partial
from typing import NamedTuple, Optional

import jax
import jax.numpy as jnp
import numpy as np

from svae import expfam as ef
from svae import inference as inf
from svae import nn
from svae.errors import InputError, NumericalError, StepError, UsageError
from svae.expfam import LOG2PI, NaturalParameters

STRUCTURES = ("gmm", "lds", "slds", "vae")
GLOBAL_KEYS = {
    "gmm": ("pi", "niw"),
    "lds": ("init_x", "dyn"),
    "slds": ("init_z", "trans", "init_x", "dyn"),
    "vae": (),
}
SEQUENTIAL = ("lds", "slds")


@dataclass(frozen=True)
class EstimatorConfig:
    """Knobs of the gradient estimator.

    ``recon="expected"`` replaces the sampled reconstruction term with its
    closed-form expectation; it needs a single-layer identity decoder.
    ``natgrad_route`` picks how the correction term reaches the natural
    parameters for mixture/switching models: ``"fisher"`` pulls it back to
    natural coordinates and solves with the Fisher matrix, ``"direct"`` uses
    the expected-statistics gradient as is (the two agree analytically).
    """

    recon: str = "sample"
    n_samples: int = 1
    local_tol: float = 1e-8
    local_iters: int = 50
    natgrad_route: str = "fisher"
    fisher_jitter: float = 1e-10

    def __post_init__(self):
        if self.recon not in ("sample", "expected"):
            raise UsageError(f"unknown recon mode {self.recon!r}")
        if self.natgrad_route not in ("fisher", "direct"):
            raise UsageError(f"unknown natgrad route {self.natgrad_route!r}")
        if self.n_samples < 1 or self.local_iters < 1:
            raise UsageError("n_samples and local_iters must be >= 1")


@dataclass(frozen=True)
class AdamState:
    m: jnp.ndarray
    v: jnp.ndarray
    t: int = 0


@dataclass(frozen=True)
class SvaeModel:
    structure: str
    prior: dict
    eta: dict
    enc_spec: nn.MlpSpec
    phi: jnp.ndarray
    dec_spec: nn.MlpSpec
    gamma: jnp.ndarray
    N: int
    gamma_factor: str = "delta"
    gamma_log_std: Optional[jnp.ndarray] = None
    gamma_prior_var: float = 1.0
    adam: Optional[AdamState] = None

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise UsageError(f"unknown structure {self.structure!r}")
        if set(self.eta) != set(GLOBAL_KEYS[self.structure]) or set(self.prior) != set(self.eta):
            raise UsageError(f"{self.structure} needs global factors {GLOBAL_KEYS[self.structure]}")
        if self.N < 1:
            raise UsageError("dataset size N must be >= 1")
        if self.gamma_factor not in ("delta", "gaussian"):
            raise UsageError(f"unknown gamma factor {self.gamma_factor!r}")
        if self.enc_spec.head != "potential" or self.dec_spec.head != "gaussian-diag":
            raise UsageError("encoder needs a potential head and decoder a gaussian-diag head")
        if self.enc_spec.n_out != self.dec_spec.n_in or self.enc_spec.n_in != self.dec_spec.n_out:
            raise UsageError("encoder and decoder dimensions do not match")
        if self.gamma_factor == "gaussian" and self.gamma_log_std is None:
            object.__setattr__(self, "gamma_log_std", jnp.full_like(jnp.asarray(self.gamma), -5.0))
        if self.adam is None:
            n = self.net_vector().shape[0]
            object.__setattr__(self, "adam", AdamState(jnp.zeros(n), jnp.zeros(n), 0))

    @property
    def m(self):
        return self.enc_spec.n_out

    @property
    def p(self):
        return self.dec_spec.n_out

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def net_vector(self):
        parts = [jnp.asarray(self.phi), jnp.asarray(self.gamma)]
        if self.gamma_factor == "gaussian":
            parts.append(jnp.asarray(self.gamma_log_std))
        return jnp.concatenate(parts)

    def with_net_vector(self, v):
        a = self.enc_spec.num_params
        b = a + self.dec_spec.num_params
        kw = dict(phi=v[:a], gamma=v[a:b])
        if self.gamma_factor == "gaussian":
            kw["gamma_log_std"] = v[b:]
        return self.replace(**kw)

    def expected_globals(self):
        return {k: ef.expected_stats(self.eta[k]).data for k in self.eta}


@dataclass(frozen=True)
class BoundReport:
    bound: float
    recon: float
    kl_local: float
    kl_global: float
    kl_gamma: float
    scale: float
    batch: tuple = ()
    rng_fingerprint: str = ""

    def check(self):
        return self.bound == self.recon - self.kl_local - self.kl_global - self.kl_gamma


@dataclass(frozen=True)
class GradientReport:
    """``natural[k]`` is the natural gradient for global factor ``k``;
    ``euclidean[k]`` the ordinary gradient (Fisher times natural).
    ``stats``/``correction`` are the two pieces of the local contribution and
    ``jittered[k]`` flags Fisher solves that needed jitter."""

    natural: dict
    euclidean: dict
    phi: jnp.ndarray
    gamma: jnp.ndarray
    gamma_log_std: Optional[jnp.ndarray] = None
    stats: dict = field(default_factory=dict)
    correction: dict = field(default_factory=dict)
    jittered: dict = field(default_factory=dict)

    def net_vector(self):
        parts = [self.phi, self.gamma]
        if self.gamma_log_std is not None:
            parts.append(self.gamma_log_std)
        return jnp.concatenate(parts)

    def all_finite(self):
        leaves = jax.tree_util.tree_leaves((self.natural, self.euclidean, self.phi, self.gamma, self.gamma_log_std))
        return all(bool(np.all(np.isfinite(np.asarray(a)))) for a in leaves)


class Noise(NamedTuple):
    """Fixed randomness for one estimate: latent noise (S, B, m), decoder
    weight noise (S, P) or None."""

    eps: jnp.ndarray
    gamma: Optional[jnp.ndarray] = None


# ---------------------------------------------------------------------------
# the jitted estimator


class _Static(NamedTuple):
    structure: str
    enc_spec: nn.MlpSpec
    dec_spec: nn.MlpSpec
    cfg: EstimatorConfig
    need_grads: bool


def _local_factor(structure, cfg, s, h, prec, eps):
    pot = inf.EvidencePotentials(h, prec)
    if structure == "gmm":
        q = inf._gmm_local(s, pot, eps, cfg.local_tol, cfg.local_iters)
    elif structure == "lds":
        q = inf._lds_local(s, pot, eps)
    elif structure == "slds":
        q = inf._slds_local(s, pot, eps, None, cfg.local_tol, cfg.local_iters)
    else:
        q = inf._gaussian_prior_local(pot, eps)
    e_psi = pot.expected(q.mean, q.cov)
    return (q.x_sample, q.mean, q.cov, jnp.sum(q.kl), e_psi), q


def _linear_decoder(gamma, p):
    W = gamma[: -2 * p].reshape(-1, 2 * p)
    b = gamma[-2 * p :]
    return W[:, :p].T, b[:p], W[:, p:].T, b[p:]


def expected_loglik(gamma, p, mean, cov, y):
    """E log N(y | C x + c, diag exp(Wl x + bl)) for x ~ N(mean, cov) per row.

    Uses E[f(x) exp(a^T x)] = exp(a^T mu + a^T S a / 2) E_{N(mu + S a, S)}[f(x)].
    """
    C, c, Wl, bl = _linear_decoder(gamma, p)
    a = -Wl  # (p, m)
    Sa = jnp.einsum("bij,dj->bdi", cov, a)  # (B, p, m)
    aSa = jnp.einsum("di,bdi->bd", a, Sa)
    mu_shift = mean[:, None, :] + Sa
    resid = y - jnp.einsum("di,bdi->bd", C, mu_shift) - c
    cSc = jnp.einsum("di,bij,dj->bd", C, cov, C)
    e_quad = jnp.exp(mean @ a.T - bl + 0.5 * aSa) * (resid**2 + cSc)
    e_lv = mean @ Wl.T + bl
    return jnp.sum(-0.5 * LOG2PI - 0.5 * e_lv - 0.5 * e_quad)


def _recon_sample(dec_spec, gamma, x_hat, mean_x, cov_x, y):
    raw, cache = nn.mlp_forward(gamma, dec_spec, x_hat)
    mean, log_var = nn.split_gaussian(raw, dec_spec.n_out)
    value = jnp.sum(nn.loglik_terms(mean, log_var, y))
    g_mean, g_lv = nn.loglik_grads(mean, log_var, y)
    g_gamma, g_x = nn.mlp_backward(gamma, dec_spec, cache, nn.gaussian_raw_grad(raw, dec_spec.n_out, g_mean, g_lv))
    clamped = jnp.any((raw[:, dec_spec.n_out :] < nn.LOGVAR_MIN) | (raw[:, dec_spec.n_out :] > nn.LOGVAR_MAX))
    return value, g_gamma, g_x, jnp.zeros_like(mean_x), jnp.zeros_like(cov_x), clamped


def _recon_expected(dec_spec, gamma, x_hat, mean, cov, y):
    value, (g_gamma, g_mean, g_cov) = jax.value_and_grad(expected_loglik, argnums=(0, 2, 3))(
        gamma, dec_spec.n_out, mean, cov, y
    )
    return value, g_gamma, jnp.zeros_like(x_hat), g_mean, g_cov, jnp.zeros((), bool)


def _kl_gamma(gamma_factor, gamma_mean, gamma_log_std, var):
    if gamma_factor == "delta":
        # point estimate: the KL term becomes the negative log prior density
        P = gamma_mean.shape[0]
        return 0.5 * jnp.sum(gamma_mean**2) / var + 0.5 * P * jnp.log(2 * jnp.pi * var)
    s2 = jnp.exp(2 * gamma_log_std)
    return jnp.sum(0.5 * (s2 + gamma_mean**2) / var - 0.5 - gamma_log_std + 0.5 * jnp.log(var))


@partial(jax.jit, static_argnums=0)
def _estimate(static: _Static, prior, eta, phi, gamma_hat, y, eps, scale):
    structure, enc_spec, dec_spec, cfg, need_grads = static
    keys = GLOBAL_KEYS[structure]
    s = {k: ef.expected_stats(eta[k]).data for k in keys}
    raw_e, cache_e = nn.mlp_forward(phi, enc_spec, y)
    h, prec = nn.split_potential(raw_e, enc_spec.n_out)
    S = eps.shape[0]

    recon = kl = 0.0
    g_gamma_hat = []
    g_h = jnp.zeros_like(h)
    g_prec = jnp.zeros_like(prec)
    g_s = {k: jnp.zeros_like(s[k]) for k in keys}
    stats = {k: jnp.zeros_like(s[k]) for k in keys}
    clamped = jnp.zeros((), bool)
    for i in range(S):
        fn = partial(_local_factor, structure, cfg, eps=eps[i])
        outs, pull, q = jax.vjp(fn, s, h, prec, has_aux=True)
        x_hat, mean, cov, kl_i, _ = outs
        recon_fn = _recon_sample if cfg.recon == "sample" else _recon_expected
        r_i, gg, ct_x, ct_mean, ct_cov, cl = recon_fn(dec_spec, gamma_hat[i], x_hat, mean, cov, y)
        recon = recon + r_i / S
        kl = kl + kl_i / S
        clamped = clamped | cl
        g_gamma_hat.append(scale * gg / S)
        if need_grads:
            c = scale / S
            ct = (c * ct_x, c * ct_mean, c * ct_cov)
            _, gh, gp = pull(ct + (-c, jnp.zeros(())))
            g_h, g_prec = g_h + gh, g_prec + gp
            if keys:
                gs, _, _ = pull(ct + (jnp.zeros(()), -c))
                g_s = {k: g_s[k] + gs[k] for k in keys}
                stats = {k: stats[k] + scale * q.stats[k] / S for k in keys}

    kl_theta = sum((jnp.sum(ef.kl_divergence(eta[k], prior[k])) for k in keys), jnp.zeros(()))
    out = dict(recon=recon, kl=kl, kl_theta=kl_theta, clamped=clamped, g_gamma_hat=jnp.stack(g_gamma_hat))
    if not need_grads:
        return out

    g_phi, _ = nn.mlp_backward(phi, enc_spec, cache_e, nn.potential_raw_grad(raw_e, enc_spec.n_out, g_h, g_prec))
    natural, euclid, correction, jittered = {}, {}, {}, {}
    for k in keys:
        e = eta[k]
        if structure in ("gmm", "slds") and cfg.natgrad_route == "fisher":
            _, pull_s = jax.vjp(lambda d: ef.expected_stats(NaturalParameters(e.family, e.dims, d)).data, e.data)
            corr, jit_flag = ef.fisher_solve(e, pull_s(g_s[k])[0], cfg.fisher_jitter)
        else:
            corr, jit_flag = g_s[k], jnp.zeros(e.data.shape[:-1], bool)
        correction[k] = corr
        jittered[k] = jit_flag
        natural[k] = prior[k].data - e.data + stats[k] + corr
        euclid[k] = ef.fisher_vector_product(e, natural[k])
    out.update(g_phi=g_phi, natural=natural, euclid=euclid, stats=stats, correction=correction, jittered=jittered)
    return out


# ---------------------------------------------------------------------------
# public estimator


def _check_batch(model, y):
    y = jnp.asarray(y, dtype=float)
    if y.ndim != 2 or y.shape[1] != model.p or y.shape[0] < 1:
        raise UsageError(f"minibatch must be a nonempty (n, {model.p}) array, got shape {y.shape}")
    if model.structure in SEQUENTIAL and y.shape[0] < 2:
        raise UsageError("sequences need at least two frames")
    if not np.all(np.isfinite(np.asarray(y))):
        raise InputError("minibatch contains non-finite values")
    return y


def default_scale(model, y):
    """N / |batch|: data points for mixtures, sequences for temporal models."""
    return float(model.N) if model.structure in SEQUENTIAL else model.N / y.shape[0]


def draw_noise(model, y, rng: np.random.Generator, n_samples=1) -> Noise:
    eps = rng.standard_normal((n_samples, y.shape[0], model.m))
    g = None
    if model.gamma_factor == "gaussian":
        g = rng.standard_normal((n_samples, model.gamma.shape[0]))
    return Noise(jnp.asarray(eps), None if g is None else jnp.asarray(g))


def _gamma_hat(model, noise):
    S = noise.eps.shape[0]
    mu = jnp.asarray(model.gamma)
    if model.gamma_factor == "delta":
        return jnp.broadcast_to(mu, (S,) + mu.shape)
    return mu + jnp.exp(model.gamma_log_std) * noise.gamma


def _fingerprint(rng):
    if rng is None:
        return ""
    st = rng.bit_generator.state
    return f"{st['bit_generator']}:{hash(str(st['state'])) & 0xFFFFFFFF:08x}"


def _run(model, y, noise, cfg, scale, need_grads):
    static = _Static(model.structure, model.enc_spec, model.dec_spec, cfg, need_grads)
    prior = {k: model.prior[k] for k in GLOBAL_KEYS[model.structure]}
    eta = {k: model.eta[k] for k in GLOBAL_KEYS[model.structure]}
    return _estimate(static, prior, eta, jnp.asarray(model.phi), _gamma_hat(model, noise), y, noise.eps, jnp.asarray(scale, float))


def _report(model, out, scale, batch, rng):
    recon = float(scale * out["recon"])
    kl_local = float(scale * out["kl"])
    kl_global = float(out["kl_theta"])
    kl_gamma = float(_kl_gamma(model.gamma_factor, model.gamma, model.gamma_log_std, model.gamma_prior_var))
    bound = recon - kl_local - kl_global - kl_gamma
    return BoundReport(bound, recon, kl_local, kl_global, kl_gamma, float(scale), tuple(batch), _fingerprint(rng))


def svae_bound(model: SvaeModel, y, noise: Noise, cfg: EstimatorConfig = EstimatorConfig(), scale=None) -> BoundReport:
    """Deterministic bound estimate for fixed noise (no gradients)."""
    y = _check_batch(model, y)
    scale = default_scale(model, y) if scale is None else scale
    out = _run(model, y, noise, cfg, scale, need_grads=False)
    return _report(model, out, scale, (), None)


def svae_gradients(
    model: SvaeModel,
    y,
    rng: np.random.Generator | None = None,
    cfg: EstimatorConfig = EstimatorConfig(),
    scale=None,
    noise: Noise | None = None,
    batch_ids=(),
):
    """One pass of the estimator on a minibatch (rows of data, or frames of one sequence)."""
    y = _check_batch(model, y)
    scale = default_scale(model, y) if scale is None else float(scale)
    fp = _fingerprint(rng)
    if noise is None:
        if rng is None:
            raise UsageError("either rng or noise is required")
        noise = draw_noise(model, y, rng, cfg.n_samples)
    out = _run(model, y, noise, cfg, scale, need_grads=True)
    report = _report(model, out, scale, batch_ids, None)
    report = dataclasses.replace(report, rng_fingerprint=fp)
    if not np.isfinite(report.bound):
        raise NumericalError(f"non-finite bound on minibatch {tuple(batch_ids)}")

    # decoder: reparameterized sample gamma_hat = mean + std * noise
    g_hat = out["g_gamma_hat"]
    var = model.gamma_prior_var
    mu = jnp.asarray(model.gamma)
    g_gamma = jnp.sum(g_hat, 0) - mu / var
    g_log_std = None
    if model.gamma_factor == "gaussian":
        std = jnp.exp(model.gamma_log_std)
        g_log_std = jnp.sum(g_hat * noise.gamma, 0) * std - (std**2 / var - 1.0)
    grads = GradientReport(
        natural=out["natural"],
        euclidean=out["euclid"],
        phi=out["g_phi"],
        gamma=g_gamma,
        gamma_log_std=g_log_std,
        stats=out["stats"],
        correction=out["correction"],
        jittered={k: np.asarray(v) for k, v in out["jittered"].items()},
    )
    return report, grads


def decoder_clamped(model, y, noise, cfg=EstimatorConfig()):
    """Whether the decoder's log-variance clamp was hit on this estimate."""
    y = _check_batch(model, y)
    return bool(_run(model, y, noise, cfg, default_scale(model, y), False)["clamped"])


# ---------------------------------------------------------------------------
# optimizer


def _adam(state: AdamState, g, lr, b1=0.9, b2=0.999, eps=1e-8):
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * g
    v = b2 * state.v + (1 - b2) * g**2
    step = lr * (m / (1 - b1**t)) / (jnp.sqrt(v / (1 - b2**t)) + eps)
    return AdamState(m, v, t), step


def sgd_step(model: SvaeModel, grads: GradientReport, step_theta=0.1, step_net=1e-3, grad_mode="natural"):
    """Ascent step.  Returns ``(model, halvings)``.

    Globals move along the natural gradient (or the ordinary gradient in
    ``"standard"`` mode); the step is halved until every factor is proper.
    Networks take an Adam step.  If 30 halvings do not restore properness a
    :class:`StepError` is raised whose ``model`` attribute holds the update
    with the globals left unchanged.
    """
    if not step_theta > 0 or step_net < 0:
        raise UsageError("step_theta must be > 0 and step_net >= 0")
    if grad_mode not in ("natural", "standard"):
        raise UsageError(f"unknown grad mode {grad_mode!r}")
    direction = grads.natural if grad_mode == "natural" else grads.euclidean

    new = model
    if step_net > 0:
        adam, step = _adam(model.adam, grads.net_vector(), step_net)
        new = model.with_net_vector(model.net_vector() + step).replace(adam=adam)

    if not direction:
        return new, 0
    rho = step_theta
    for halvings in range(31):
        eta = {k: NaturalParameters(e.family, e.dims, e.data + rho * direction[k]) for k, e in model.eta.items()}
        if all(ef.is_proper(e) for e in eta.values()):
            return new.replace(eta=eta), halvings
        rho *= 0.5
    err = StepError("global step could not be made proper after 30 halvings")
    err.model = new
    raise err


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 1
    step_theta: float = 0.1
    step_net: float = 1e-3
    grad_mode: str = "natural"
    seed: int = 0
    max_steps: Optional[int] = None
    estimator: EstimatorConfig = EstimatorConfig()

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise UsageError("epochs must be >= 0 and batch_size >= 1")
        if not self.step_theta > 0 or self.step_net < 0:
            raise UsageError("step_theta must be > 0 and step_net >= 0")
        if self.grad_mode not in ("natural", "standard"):
            raise UsageError(f"unknown grad mode {self.grad_mode!r}")


def minibatches(model, data, batch_size, rng):
    """One epoch of uniformly shuffled minibatch indices (without replacement).
    Temporal models always use one sequence per batch."""
    n = data.shape[0]
    order = rng.permutation(n)
    size = 1 if model.structure in SEQUENTIAL else batch_size
    return [order[i : i + size] for i in range(0, n, size)]


def _batch_array(model, data, idx):
    return data[idx[0]] if model.structure in SEQUENTIAL else data[idx]


def epoch_rng(seed, epoch):
    return np.random.default_rng([seed, 0, epoch])


def step_rng(seed, step):
    return np.random.default_rng([seed, 1, step])


def train(model: SvaeModel, data, config: TrainConfig, callback=None, start_step=0):
    """Run the optimizer.  Returns ``(model, metrics)`` where ``metrics`` is a
    list of per-step dicts.  ``callback(step, model, record)`` runs after
    every step (checkpointing, logging).

    Shuffles and Monte Carlo noise come from counter-based streams keyed on
    ``(seed, epoch)`` and ``(seed, step)``, so resuming from a model saved
    after ``start_step`` steps replays the uninterrupted run exactly.
    """
    data = np.asarray(data, dtype=float)
    expected_ndim = 3 if model.structure in SEQUENTIAL else 2
    if data.ndim != expected_ndim:
        raise UsageError(f"{model.structure} training data must be {expected_ndim}-dimensional")
    metrics = []
    step = 0
    for epoch in range(config.epochs):
        for idx in minibatches(model, data, config.batch_size, epoch_rng(config.seed, epoch)):
            if config.max_steps is not None and step >= config.max_steps:
                return model, metrics
            if step < start_step:
                step += 1
                continue
            t0 = time.perf_counter()
            y = _batch_array(model, data, idx)
            rng = step_rng(config.seed, step)
            report, grads = svae_gradients(model, y, rng, config.estimator, batch_ids=tuple(int(i) for i in idx))
            step_error = False
            try:
                model, halvings = sgd_step(model, grads, config.step_theta, config.step_net, config.grad_mode)
            except StepError as e:
                model, halvings, step_error = e.model, 30, True
            step += 1
            record = dict(
                step=step,
                bound=report.bound,
                recon=report.recon,
                kl_local=report.kl_local,
                kl_global=report.kl_global,
                wallclock_ms=1000.0 * (time.perf_counter() - t0),
                grad_mode=config.grad_mode,
                halvings=halvings,
                step_error=step_error,
                jittered=int(sum(np.sum(v) for v in grads.jittered.values())),
            )
            metrics.append(record)
            if callback is not None:
                callback(step, model, record)
    return model, metrics


# ---------------------------------------------------------------------------
# full-data evaluation


def evaluate_bound(model: SvaeModel, data, seed=0, cfg: EstimatorConfig = EstimatorConfig()):
    """Full-data bound with fixed noise: every datum/sequence counted once."""
    data = np.asarray(data, dtype=float)
    rng = np.random.default_rng(seed)
    if model.structure in SEQUENTIAL:
        parts = [svae_bound(model, seq, draw_noise(model, seq, rng, cfg.n_samples), cfg, scale=1.0) for seq in data]
    else:
        parts = [svae_bound(model, data, draw_noise(model, data, rng, cfg.n_samples), cfg, scale=1.0)]
    recon = sum(p.recon for p in parts)
    kl_local = sum(p.kl_local for p in parts)
    kl_global = parts[0].kl_global
    kl_gamma = parts[0].kl_gamma
    bound = recon - kl_local - kl_global - kl_gamma
    return BoundReport(bound, recon, kl_local, kl_global, kl_gamma, 1.0)
