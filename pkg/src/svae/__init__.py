"""Structured variational autoencoders: conjugate latent graphical models with
neural-network likelihoods, fit with natural-gradient SVI."""

import os


def _apply_thread_cap():
    """SVAE_THREADS caps XLA and BLAS worker threads; it has to be applied
    before jax creates its CPU backend."""
    n = os.environ.get("SVAE_THREADS")
    if not n:
        return
    if not n.isdigit() or int(n) < 1:
        raise ValueError(f"SVAE_THREADS must be a positive integer, got {n!r}")
    flags = os.environ.get("XLA_FLAGS", "")
    os.environ["XLA_FLAGS"] = f"{flags} --xla_cpu_multi_thread_eigen=false intra_op_parallelism_threads={n}".strip()
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, n)


_apply_thread_cap()

import jax  # noqa: E402

jax.config.update("jax_enable_x64", True)

from svae.errors import (  # noqa: E402
    ConfigError,
    DomainError,
    FormatError,
    InputError,
    NumericalError,
    StepError,
    SvaeError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DomainError",
    "FormatError",
    "InputError",
    "NumericalError",
    "StepError",
    "SvaeError",
    "UsageError",
]
