"""Gradient checks shared by the test suite and the ``gradcheck`` command."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from svae import conjugate
from svae import expfam as ef
from svae.core import EstimatorConfig, Noise, SvaeModel, draw_noise, sgd_step, svae_bound, svae_gradients
from svae.errors import UsageError
from svae.models import conjugate_sanity_model

# fixed iteration count so the bound is a smooth function of the parameters
FD_ESTIMATOR = EstimatorConfig(local_tol=0.0, local_iters=30)


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self):
        return bool(np.isfinite(self.error) and self.error < self.tol)

    def line(self):
        tol = f"{self.tol:g}".replace("e-0", "e-")
        return f"{self.name}: max err < {tol}: {'PASS' if self.passed else 'FAIL'} ({self.error:.3e})"


def _random_spd(rng, m, scale=1.0):
    A = rng.standard_normal((m, m))
    return scale * (A @ A.T / m + np.eye(m))


def random_sanity_instance(seed, m=2, T=6, N=3):
    """A linear-Gaussian LDS wired as an SVAE with random globals, prior and
    data.  Returns ``(model, y)`` with ``y`` of shape (T, m)."""
    rng = np.random.default_rng(seed)

    def factors():
        init_x = ef.niw(0.3 * rng.standard_normal(m), rng.uniform(0.5, 2.0), _random_spd(rng, m), m + 2.0 + rng.uniform(0, 3))
        M = 0.8 * np.eye(m) + 0.1 * rng.standard_normal((m, m))
        dyn = ef.mniw(M, _random_spd(rng, m), _random_spd(rng, m, 0.5), m + 2.0 + rng.uniform(0, 3))
        return init_x, dyn

    init_x, dyn = factors()
    p_init, p_dyn = factors()
    C = rng.uniform(0.5, 1.5, m) * rng.choice([-1.0, 1.0], m)
    R = rng.uniform(0.2, 1.0, m)
    model = conjugate_sanity_model(m, C, R, init_x, dyn, N=N, prior=dict(init_x=p_init, dyn=p_dyn))
    y = rng.standard_normal((T, m))
    return model, y


def svi_equivalence(model: SvaeModel, y) -> float:
    """Max abs difference between the estimator's natural gradient and the
    conjugate formula eta0 + N E_q*[(t_x, 1)] - eta on a linear-Gaussian LDS."""
    cfg = EstimatorConfig(recon="expected")
    noise = Noise(np.zeros((1,) + np.shape(y)))
    _, g = svae_gradients(model, y, cfg=cfg, noise=noise)
    ref = conjugate.svi_natural_gradient(model, y, scale=model.N)
    return max(float(np.max(np.abs(np.asarray(g.natural[k]) - ref[k]))) for k in ref)


def conjugate_step(model: SvaeModel, y) -> float:
    """Max abs difference between a unit natural-gradient step and the
    closed-form conjugate update."""
    cfg = EstimatorConfig(recon="expected")
    noise = Noise(np.zeros((1,) + np.shape(y)))
    _, g = svae_gradients(model, y, cfg=cfg, noise=noise)
    stepped, _ = sgd_step(model, g, step_theta=1.0, step_net=0.0)
    ref = conjugate.conjugate_update(model, y, scale=model.N)
    return max(float(np.max(np.abs(np.asarray(stepped.eta[k].data) - np.asarray(ref.eta[k].data)))) for k in ref.eta)


def _fd(f, x, h):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def _rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def network_fd(model: SvaeModel, y, noise: Noise | None = None, seed=0, h=1e-6, cfg=FD_ESTIMATOR):
    """Relative errors ``{"phi": .., "gamma": ..}`` (and ``gamma_log_std`` for a
    Gaussian q(gamma)) between the reparameterization gradients and central
    differences of the bound at fixed noise."""
    y = np.asarray(y, dtype=float)
    if noise is None:
        noise = draw_noise(model, y, np.random.default_rng(seed), cfg.n_samples)
    _, g = svae_gradients(model, y, cfg=cfg, noise=noise)

    def bound(**kw):
        return svae_bound(model.replace(**kw), y, noise, cfg).bound

    errs = dict(
        phi=_rel(g.phi, _fd(lambda v: bound(phi=v), model.phi, h)),
        gamma=_rel(g.gamma, _fd(lambda v: bound(gamma=v), model.gamma, h)),
    )
    if model.gamma_factor == "gaussian":
        errs["gamma_log_std"] = _rel(g.gamma_log_std, _fd(lambda v: bound(gamma_log_std=v), model.gamma_log_std, h))
    return errs


def run_suite(model: SvaeModel | None = None, y=None, seed=0, instances=5):
    """Checks for the ``gradcheck`` command.  Without a model, runs the SVI
    checks on ``instances`` random linear-Gaussian LDS models and the
    finite-difference check on the first; with one, only the
    finite-difference check (plus SVI checks when it is linear-Gaussian)."""
    results = []
    if model is None:
        pairs = [random_sanity_instance(seed + i) for i in range(instances)]
        fd_model, fd_y = pairs[0]
    else:
        fd_model, fd_y = model, y
        try:
            conjugate.linear_gaussian_parts(model)
            pairs = [(model, y)] if y.ndim == 2 else [(model, s) for s in y]
        except UsageError:
            pairs = []
        if fd_y.ndim == 3:
            fd_y = fd_y[0]
    if pairs:
        results.append(CheckResult("svi-equivalence", max(svi_equivalence(m, s) for m, s in pairs), 1e-8))
        results.append(CheckResult("conjugate-update", max(conjugate_step(m, s) for m, s in pairs), 1e-8))
    for k, v in network_fd(fd_model, fd_y, seed=seed).items():
        results.append(CheckResult(f"finite-difference {k}", v, 1e-4))
    return results
