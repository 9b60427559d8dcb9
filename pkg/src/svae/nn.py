"""Small MLPs with hand-written reverse-mode rules.

Parameters live in one flat vector.  Layer ``l`` maps ``widths[l]`` to
``widths[l+1]`` units, except that the last layer emits twice the final width:
the two halves are (mean, log-variance) for a ``gaussian-diag`` head and
(precision-weighted mean, log-precision) for a ``potential`` head.

The functional core (:func:`mlp_forward` / :func:`mlp_backward`) is plain jnp
over a leading batch axis so it can be jitted into the gradient estimator.
The public wrappers validate inputs and record a :class:`Tape` for
:func:`backward`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import jax.numpy as jnp
import numpy as np

from svae.errors import InputError, UsageError
from svae.expfam import LOG2PI

LOGVAR_MIN = float(np.log(1e-8))
LOGVAR_MAX = float(np.log(1e8))

NONLINEARITIES = ("tanh", "relu", "identity")
HEADS = ("gaussian-diag", "potential")


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple
    nonlinearity: str = "tanh"
    head: str = "gaussian-diag"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise UsageError(f"widths must list at least input and output sizes >= 1, got {self.widths}")
        if self.nonlinearity not in NONLINEARITIES:
            raise UsageError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.head not in HEADS:
            raise UsageError(f"unknown head {self.head!r}")

    @property
    def n_in(self):
        return self.widths[0]

    @property
    def n_out(self):
        return self.widths[-1]

    def layer_shapes(self):
        ws = list(self.widths[:-1]) + [2 * self.widths[-1]]
        return [(ws[i], ws[i + 1]) for i in range(len(ws) - 1)]

    def layout(self):
        """[(w_start, w_stop, b_stop, (fan_in, fan_out))] per layer."""
        out, k = [], 0
        for fi, fo in self.layer_shapes():
            out.append((k, k + fi * fo, k + fi * fo + fo, (fi, fo)))
            k += fi * fo + fo
        return out

    @property
    def num_params(self):
        return sum(fi * fo + fo for fi, fo in self.layer_shapes())


@dataclass(frozen=True)
class NetworkParameters:
    spec: MlpSpec
    flat: jnp.ndarray

    def __post_init__(self):
        flat = jnp.asarray(self.flat, dtype=float)
        if flat.shape != (self.spec.num_params,):
            raise UsageError(f"expected {self.spec.num_params} parameters, got shape {flat.shape}")
        object.__setattr__(self, "flat", flat)

    def layer(self, l):
        w0, w1, b1, shape = self.spec.layout()[l]
        return self.flat[w0:w1].reshape(shape), self.flat[w1:b1]


@dataclass(frozen=True)
class GradientBuffer:
    """Gradients in the parameter layout, plus the input gradient if asked."""

    spec: MlpSpec
    flat: jnp.ndarray
    x: jnp.ndarray | None = None


def init_params(spec: MlpSpec, rng: np.random.Generator) -> NetworkParameters:
    """Weights ~ N(0, 1/fan_in), zero biases."""
    parts = []
    for fi, fo in spec.layer_shapes():
        parts.append(rng.standard_normal(fi * fo) / np.sqrt(fi))
        parts.append(np.zeros(fo))
    return NetworkParameters(spec, jnp.asarray(np.concatenate(parts)))


def set_layer(params: NetworkParameters, l, W=None, b=None) -> NetworkParameters:
    w0, w1, b1, shape = params.spec.layout()[l]
    flat = params.flat
    if W is not None:
        flat = flat.at[w0:w1].set(jnp.asarray(W, dtype=float).reshape(-1))
    if b is not None:
        flat = flat.at[w1:b1].set(jnp.asarray(b, dtype=float))
    return NetworkParameters(params.spec, flat)


# ---------------------------------------------------------------------------
# functional core


def _act(name, a):
    if name == "tanh":
        return jnp.tanh(a)
    if name == "relu":
        return jnp.maximum(a, 0.0)
    return a


def _act_grad(name, a, out):
    if name == "tanh":
        return 1.0 - out**2
    if name == "relu":
        return (a > 0).astype(a.dtype)
    return jnp.ones_like(a)


def mlp_forward(flat, spec: MlpSpec, x):
    """Raw outputs (B, 2 * n_out) and the per-layer cache for backward."""
    cache = []
    a = x
    layout = spec.layout()
    for l, (w0, w1, b1, shape) in enumerate(layout):
        W = flat[w0:w1].reshape(shape)
        z = a @ W + flat[w1:b1]
        if l < len(layout) - 1:
            out = _act(spec.nonlinearity, z)
            cache.append((a, z, out))
            a = out
        else:
            cache.append((a, z, z))
            a = z
    return a, cache


def mlp_backward(flat, spec: MlpSpec, cache, g_out):
    """Reverse pass: (gradient wrt flat params summed over batch, gradient wrt x)."""
    layout = spec.layout()
    grads = [None] * len(layout)
    g = g_out
    for l in range(len(layout) - 1, -1, -1):
        w0, w1, b1, shape = layout[l]
        a_in, z, out = cache[l]
        if l < len(layout) - 1:
            g = g * _act_grad(spec.nonlinearity, z, out)
        W = flat[w0:w1].reshape(shape)
        grads[l] = (jnp.einsum("bi,bo->io", a_in, g).reshape(-1), jnp.sum(g, axis=0))
        g = g @ W.T
    return jnp.concatenate([p for pair in grads for p in pair]), g


def split_gaussian(raw, n_out):
    mean = raw[:, :n_out]
    log_var = jnp.clip(raw[:, n_out:], LOGVAR_MIN, LOGVAR_MAX)
    return mean, log_var


def gaussian_raw_grad(raw, n_out, g_mean, g_log_var):
    inside = (raw[:, n_out:] >= LOGVAR_MIN) & (raw[:, n_out:] <= LOGVAR_MAX)
    return jnp.concatenate([g_mean, jnp.where(inside, g_log_var, 0.0)], axis=1)


def split_potential(raw, n_out):
    return raw[:, :n_out], jnp.exp(raw[:, n_out:])


def potential_raw_grad(raw, n_out, g_h, g_prec):
    return jnp.concatenate([g_h, g_prec * jnp.exp(raw[:, n_out:])], axis=1)


def loglik_terms(mean, log_var, y):
    return -0.5 * LOG2PI - 0.5 * log_var - 0.5 * (y - mean) ** 2 * jnp.exp(-log_var)


def loglik_grads(mean, log_var, y):
    """d/d(mean, log_var) of the summed diagonal Gaussian log density."""
    r = (y - mean) * jnp.exp(-log_var)
    return r, -0.5 + 0.5 * (y - mean) * r


# ---------------------------------------------------------------------------
# validated wrappers with a tape


@dataclass
class Tape:
    """Intermediates of one forward pass; consumed by :func:`backward`."""

    records: list = field(default_factory=list)

    def clear(self):
        self.records.clear()


def _flat(params, spec):
    if isinstance(params, NetworkParameters):
        if params.spec != spec:
            raise UsageError("parameters were built for a different MlpSpec")
        return params.flat
    return NetworkParameters(spec, params).flat


def _batch(x, n_in, what):
    x = jnp.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None] if single else x
    if xb.ndim != 2 or xb.shape[1] != n_in:
        raise UsageError(f"{what} must have trailing size {n_in}, got shape {x.shape}")
    if not np.all(np.isfinite(np.asarray(xb))):
        raise InputError(f"{what} contains non-finite values")
    return xb, single


def _run(params, spec, x, head, tape, what):
    if spec.head != head:
        raise UsageError(f"network has a {spec.head!r} head, not {head!r}")
    flat = _flat(params, spec)
    xb, single = _batch(x, spec.n_in, what)
    raw, cache = mlp_forward(flat, spec, xb)
    if tape is not None:
        tape.records.append(dict(spec=spec, flat=flat, cache=cache, raw=raw, single=single))
    return raw, single


def forward_gaussian(params, spec: MlpSpec, x, tape: Tape | None = None):
    """(mean, log_var) of the observation density at latent ``x`` (one vector or a batch)."""
    raw, single = _run(params, spec, x, "gaussian-diag", tape, "x")
    mean, log_var = split_gaussian(raw, spec.n_out)
    return (mean[0], log_var[0]) if single else (mean, log_var)


def recognition_potentials(params, spec: MlpSpec, y, tape: Tape | None = None):
    """Diagonal Gaussian evidence potentials for each frame of ``y``."""
    from svae.inference import EvidencePotentials

    raw, _ = _run(params, spec, y, "potential", tape, "y")
    h, prec = split_potential(raw, spec.n_out)
    return EvidencePotentials(h, prec)


def clamp_active(log_var):
    lv = np.asarray(log_var)
    return bool(np.any((lv <= LOGVAR_MIN) | (lv >= LOGVAR_MAX)))


def gaussian_loglik(mean, log_var, y):
    mean, log_var, y = (jnp.asarray(a, dtype=float) for a in (mean, log_var, y))
    if mean.shape != y.shape or log_var.shape != y.shape:
        raise UsageError(f"shape mismatch: mean {mean.shape}, log_var {log_var.shape}, y {y.shape}")
    return jnp.sum(loglik_terms(mean, log_var, y))


def backward(tape: Tape, g_first, g_second, wrt_input=False) -> GradientBuffer:
    """Pull cotangents of the head outputs back through the most recent forward.

    ``g_first``/``g_second`` are the gradients of a scalar loss wrt
    (mean, log_var) or (h, precision), matching the recorded head.
    """
    if not tape.records:
        raise UsageError("backward called without a recorded forward pass")
    rec = tape.records.pop()
    spec, raw = rec["spec"], rec["raw"]
    g1 = jnp.atleast_2d(jnp.asarray(g_first, dtype=float))
    g2 = jnp.atleast_2d(jnp.asarray(g_second, dtype=float))
    if g1.shape != (raw.shape[0], spec.n_out) or g2.shape != g1.shape:
        raise UsageError("cotangent shapes do not match the recorded forward pass")
    if spec.head == "gaussian-diag":
        g_raw = gaussian_raw_grad(raw, spec.n_out, g1, g2)
    else:
        g_raw = potential_raw_grad(raw, spec.n_out, g1, g2)
    g_flat, g_x = mlp_backward(rec["flat"], spec, rec["cache"], g_raw)
    if wrt_input:
        g_x = g_x[0] if rec["single"] else g_x
    else:
        g_x = None
    return GradientBuffer(spec, g_flat, g_x)
