"""SVAECP1 checkpoints: a serialized model plus the training position.

Same layout as the dataset format (magic, uint32 header length, JSON header,
float64 arrays).  The header carries the structure tag, network specs,
global factor families, optimizer counters and the training RNG position
``{"seed", "step"}``; training streams are counter-based so those two numbers
are the whole RNG state.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import jax.numpy as jnp
import numpy as np

from svae import nn
from svae.core import AdamState, SvaeModel
from svae.data import parse_header, unpack_arrays
from svae.errors import FormatError, UsageError
from svae.expfam import NaturalParameters

MAGIC = b"SVAECP1"
VERSION = 1


@dataclass
class Checkpoint:
    model: SvaeModel
    step: int = 0
    seed: int = 0
    run: dict = field(default_factory=dict)


def _spec_dict(spec):
    return dict(widths=list(spec.widths), nonlinearity=spec.nonlinearity, head=spec.head)


def _arrays(model):
    out = {}
    for k in model.eta:
        out[f"prior.{k}"] = model.prior[k].data
        out[f"eta.{k}"] = model.eta[k].data
    out["phi"] = model.phi
    out["gamma"] = model.gamma
    if model.gamma_log_std is not None:
        out["gamma_log_std"] = model.gamma_log_std
    out["adam.m"] = model.adam.m
    out["adam.v"] = model.adam.v
    return {k: np.asarray(v, dtype=np.float64) for k, v in out.items()}


def save(path, ckpt: Checkpoint):
    model = ckpt.model
    arrays = _arrays(model)
    header = dict(
        version=VERSION,
        structure=model.structure,
        N=model.N,
        gamma_factor=model.gamma_factor,
        gamma_prior_var=model.gamma_prior_var,
        enc_spec=_spec_dict(model.enc_spec),
        dec_spec=_spec_dict(model.dec_spec),
        globals={k: dict(family=e.family, dims=list(e.dims)) for k, e in model.eta.items()},
        adam_t=int(model.adam.t),
        rng=dict(seed=int(ckpt.seed), step=int(ckpt.step)),
        run=ckpt.run,
        arrays=[dict(name=k, shape=list(v.shape)) for k, v in arrays.items()],
    )
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for v in arrays.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    header, offset = parse_header(MAGIC, (VERSION,), raw)
    arrays = unpack_arrays(raw, offset, header.get("arrays", []))
    try:
        factors = header["globals"]
        prior, eta = {}, {}
        for k, meta in factors.items():
            dims = tuple(meta["dims"])
            prior[k] = NaturalParameters(meta["family"], dims, jnp.asarray(arrays[f"prior.{k}"]))
            eta[k] = NaturalParameters(meta["family"], dims, jnp.asarray(arrays[f"eta.{k}"]))
        log_std = arrays.get("gamma_log_std")
        model = SvaeModel(
            structure=header["structure"],
            prior=prior,
            eta=eta,
            enc_spec=nn.MlpSpec(**header["enc_spec"]),
            phi=jnp.asarray(arrays["phi"]),
            dec_spec=nn.MlpSpec(**header["dec_spec"]),
            gamma=jnp.asarray(arrays["gamma"]),
            N=int(header["N"]),
            gamma_factor=header["gamma_factor"],
            gamma_log_std=None if log_std is None else jnp.asarray(log_std),
            gamma_prior_var=float(header["gamma_prior_var"]),
            adam=AdamState(jnp.asarray(arrays["adam.m"]), jnp.asarray(arrays["adam.v"]), int(header["adam_t"])),
        )
        rng = header["rng"]
        return Checkpoint(model, int(rng["step"]), int(rng["seed"]), header.get("run", {}))
    except (KeyError, TypeError, UsageError) as e:
        raise FormatError(f"invalid checkpoint: {e}", offset) from None
