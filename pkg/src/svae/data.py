"""Synthetic datasets and the SVAEDS1 file format.

File layout (little-endian)::

    b"SVAEDS1"                      7 bytes magic
    uint32 header_length            4 bytes
    header (UTF-8 JSON)             header_length bytes
    arrays                          float64, row-major, in header order

The header records ``version``, ``kind``, ``seed``, ``params`` and the list
of arrays as ``{"name", "shape"}`` entries.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from svae.errors import FormatError, UsageError

MAGIC = b"SVAEDS1"
VERSION = 1
KINDS = ("points2d", "image-seq", "frame-seq")


@dataclass
class Dataset:
    kind: str
    data: np.ndarray
    extras: dict = field(default_factory=dict)
    seed: int | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UsageError(f"unknown dataset kind {self.kind!r}")
        self.data = np.asarray(self.data, dtype=np.float64)
        want = 2 if self.kind == "points2d" else 3
        if self.data.ndim != want:
            raise UsageError(f"{self.kind} data must be {want}-dimensional, got shape {self.data.shape}")
        if self.kind == "image-seq" and (self.data.min(initial=0.0) < 0 or self.data.max(initial=0.0) > 1):
            raise UsageError("image intensities must lie in [0, 1]")

    @property
    def shape(self):
        return self.data.shape

    def arrays(self):
        return {"data": self.data, **{k: np.asarray(v) for k, v in self.extras.items()}}


# ---------------------------------------------------------------------------
# generators


def spiral_curve(t, arm, arms, r0=0.25, r1=1.0, turns=0.75):
    """Point at fraction ``t`` in [0, 1] along arm ``arm``: radius grows
    linearly with angle, arms rotated evenly about the origin."""
    theta = 2 * np.pi * (turns * t + arm / arms)
    r = r0 + (r1 - r0) * t
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)


def gen_spiral(n_per_arm=500, arms=2, noise_sd=0.05, seed=0, r0=0.25, r1=1.0, turns=0.75) -> Dataset:
    if n_per_arm < 1 or arms < 1 or noise_sd < 0:
        raise UsageError("need n_per_arm >= 1, arms >= 1, noise_sd >= 0")
    rng = np.random.default_rng(seed)
    t = rng.uniform(size=(arms, n_per_arm))
    labels = np.repeat(np.arange(arms), n_per_arm)
    clean = np.concatenate([spiral_curve(t[a], a, arms, r0, r1, turns) for a in range(arms)])
    points = clean + noise_sd * rng.standard_normal(clean.shape)
    params = dict(n_per_arm=n_per_arm, arms=arms, noise_sd=noise_sd, r0=r0, r1=r1, turns=turns)
    return Dataset("points2d", points, dict(labels=labels, positions=t.ravel()), seed, params)


def bounce(u, lo, hi):
    """Triangle wave reflecting between ``lo`` and ``hi``."""
    span = hi - lo
    if span <= 0:
        return np.full_like(np.asarray(u, float), lo)
    v = np.mod(u, 2 * span)
    return lo + np.where(v <= span, v, 2 * span - v)


def gen_dot_video(num_seq=80, T=50, width_px=20, dot_sd=1.5, seed=0, speed_min=0.3, speed_max=1.0,
                  margin=None) -> Dataset:
    """1D images of a Gaussian dot bouncing between two walls.

    The centre stays ``margin`` pixels (default 3 dot widths) away from the
    image edges so the intensity-weighted mean tracks it.
    """
    if T < 2 or width_px < 4 or num_seq < 1 or dot_sd <= 0:
        raise UsageError("need T >= 2, width_px >= 4, num_seq >= 1, dot_sd > 0")
    if speed_min < 0 or speed_max < speed_min:
        raise UsageError("need 0 <= speed_min <= speed_max")
    margin = min(3.0 * dot_sd, 0.25 * (width_px - 1)) if margin is None else margin
    lo, hi = margin, width_px - 1 - margin
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * max(hi - lo, 0), size=num_seq)
    speed = rng.uniform(speed_min, speed_max, size=num_seq)
    centers = bounce(phase[:, None] + speed[:, None] * np.arange(T)[None, :], lo, hi)
    pix = np.arange(width_px)
    frames = np.exp(-((pix[None, None, :] - centers[..., None]) ** 2) / (2 * dot_sd**2))
    params = dict(num_seq=num_seq, T=T, width_px=width_px, dot_sd=dot_sd, speed_min=speed_min,
                  speed_max=speed_max, margin=margin)
    return Dataset("image-seq", frames, dict(centers=centers, speeds=speed, phases=phase), seed, params)


# ---------------------------------------------------------------------------
# I/O


def _header(ds: Dataset):
    arrays = ds.arrays()
    return dict(
        version=VERSION,
        kind=ds.kind,
        seed=ds.seed,
        params=ds.params,
        arrays=[dict(name=k, shape=list(v.shape)) for k, v in arrays.items()],
    ), arrays


def write(path, ds: Dataset):
    header, arrays = _header(ds)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for v in arrays.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    os.replace(tmp, path)


def parse_header(magic, version_ok, raw):
    """Shared parser for magic + length-prefixed JSON headers.  Returns
    (header dict, offset of the payload)."""
    n = len(magic)
    if len(raw) < n or raw[:n] != magic:
        raise FormatError(f"bad magic, expected {magic!r}", 0)
    if len(raw) < n + 4:
        raise FormatError("truncated header length", n)
    (hlen,) = struct.unpack("<I", raw[n : n + 4])
    start = n + 4
    if len(raw) < start + hlen:
        raise FormatError("truncated header", len(raw))
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt header: {e}", start) from None
    if not isinstance(header, dict):
        raise FormatError("header is not a JSON object", start)
    if header.get("version") not in version_ok:
        raise FormatError(f"unsupported version {header.get('version')!r}", start)
    return header, start + hlen


def unpack_arrays(raw, offset, specs):
    out = {}
    for spec in specs:
        try:
            name, shape = spec["name"], tuple(int(s) for s in spec["shape"])
        except (KeyError, TypeError, ValueError):
            raise FormatError("malformed array entry in header", offset) from None
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if len(raw) < offset + nbytes:
            raise FormatError(f"truncated data for array {name!r}", len(raw))
        out[name] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise FormatError("trailing bytes after last array", offset)
    return out


def read(path) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    header, offset = parse_header(MAGIC, (VERSION,), raw)
    arrays = unpack_arrays(raw, offset, header.get("arrays", []))
    if "data" not in arrays:
        raise FormatError("no data array", offset)
    data = arrays.pop("data")
    if "labels" in arrays:
        arrays["labels"] = arrays["labels"].astype(np.int64)
    try:
        return Dataset(header["kind"], data, arrays, header.get("seed"), header.get("params", {}))
    except (KeyError, UsageError) as e:
        raise FormatError(f"invalid dataset: {e}", offset) from None
