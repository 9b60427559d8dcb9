"""Command-line harness: ``generate``, ``train``, ``eval``, ``forecast``, ``gradcheck``.

Config documents are INI files with three sections::

    [model]       ModelConfig fields (structure, K, m, enc_hidden = 50,50, ...)
    [optimizer]   step_theta, step_net, epochs, batch_size, seed, grad_mode,
                  max_steps, recon, n_samples, local_tol, local_iters, natgrad_route
    [io]          data, out_dir, checkpoint_every

Unknown sections or keys are rejected.  ``none`` clears optional values.
Command-line flags override the file; ``--set section.key=value`` reaches
any key without a dedicated flag.

Exit codes: 0 ok, 1 a gradient check failed, 2 usage/config/input errors,
3 numeric collapse during training (the last checkpoint is kept).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import os
import sys
import typing

import numpy as np

from svae import checkpoint as ckpt_io
from svae import core, data, gradcheck, models
from svae.errors import ConfigError, FormatError, InputError, NumericalError, SvaeError, UsageError

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

OPTIMIZER_KEYS = ("step_theta", "step_net", "epochs", "batch_size", "seed", "grad_mode", "max_steps")
ESTIMATOR_KEYS = ("recon", "n_samples", "local_tol", "local_iters", "natgrad_route")
IO_DEFAULTS = dict(data=None, out_dir=None, checkpoint_every=0)
MODEL_KEYS = tuple(f.name for f in dataclasses.fields(models.ModelConfig) if f.name != "N")


def _field_types(cls):
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _coerce(value: str, typ, key):
    v = value.strip()
    optional = typing.get_origin(typ) is typing.Union and type(None) in typing.get_args(typ)
    if optional:
        if v.lower() == "none":
            return None
        typ = next(a for a in typing.get_args(typ) if a is not type(None))
    try:
        if typ is bool:
            if v.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(v)
            return v.lower() in ("true", "1", "yes")
        if typ is int:
            return int(v)
        if typ is float:
            return float(v)
        if typ is tuple:
            return tuple(int(w) for w in v.split(",") if w.strip())
        return v
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


_MODEL_TYPES = _field_types(models.ModelConfig)
_TRAIN_TYPES = _field_types(core.TrainConfig)
_EST_TYPES = _field_types(core.EstimatorConfig)
_IO_TYPES = dict(data=typing.Optional[str], out_dir=typing.Optional[str], checkpoint_every=int)


def _key_type(section, key):
    if section == "model" and key in MODEL_KEYS:
        return _MODEL_TYPES[key]
    if section == "optimizer" and key in OPTIMIZER_KEYS:
        return _TRAIN_TYPES[key]
    if section == "optimizer" and key in ESTIMATOR_KEYS:
        return _EST_TYPES[key]
    if section == "io" and key in IO_DEFAULTS:
        return _IO_TYPES[key]
    raise ConfigError(f"unknown config key [{section}] {key}")


@dataclasses.dataclass
class RunConfig:
    """Resolved ``train`` parameters: file values overridden by flags."""

    model: dict = dataclasses.field(default_factory=dict)
    optimizer: dict = dataclasses.field(default_factory=dict)
    io: dict = dataclasses.field(default_factory=lambda: dict(IO_DEFAULTS))

    def set(self, section, key, raw):
        typ = _key_type(section, key)
        value = _coerce(raw, typ, f"[{section}] {key}") if isinstance(raw, str) else raw
        getattr(self, section)[key] = value

    def model_config(self, N, p=None):
        """``N`` and (unless configured) ``p`` come from the dataset."""
        kw = dict(self.model)
        if p is not None:
            kw.setdefault("p", p)
        return models.ModelConfig(**kw, N=N)

    def train_config(self):
        est = {k: v for k, v in self.optimizer.items() if k in ESTIMATOR_KEYS}
        opt = {k: v for k, v in self.optimizer.items() if k in OPTIMIZER_KEYS}
        return core.TrainConfig(**opt, estimator=core.EstimatorConfig(**est))

    def validate(self, N=1):
        self.model_config(N)
        self.train_config()
        if self.io["checkpoint_every"] < 0:
            raise ConfigError("checkpoint_every must be >= 0")

    def to_dict(self):
        return dict(model={k: list(v) if isinstance(v, tuple) else v for k, v in self.model.items()},
                    optimizer=dict(self.optimizer), io=dict(self.io))


def read_config(path) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except configparser.Error as e:
        raise ConfigError(f"malformed config {path}: {e}") from None
    run = RunConfig()
    for section in parser.sections():
        if section not in ("model", "optimizer", "io"):
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            run.set(section, key, raw)
    return run


# ---------------------------------------------------------------------------
# helpers


def _load_dataset(path):
    if not path:
        raise UsageError("a dataset path is required (--data or [io] data)")
    try:
        return data.read(path)
    except OSError as e:
        raise UsageError(f"cannot read dataset {path}: {e.strerror}") from None


def _load_checkpoint(path):
    try:
        return ckpt_io.load(path)
    except OSError as e:
        raise UsageError(f"cannot read checkpoint {path}: {e.strerror}") from None


def _structure_matches(model, ds):
    want = "image-seq" if model.structure in core.SEQUENTIAL else "points2d"
    if ds.kind != want:
        raise UsageError(f"a {model.structure} model needs {want} data, got {ds.kind}")
    if ds.data.shape[-1] != model.p:
        raise UsageError(f"model expects {model.p}-dimensional observations, data has {ds.data.shape[-1]}")


def _dump(obj, out):
    text = json.dumps(obj, indent=2, sort_keys=True)
    print(text)
    if out:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text + "\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args):
    if not args.out:
        raise UsageError("missing output path (--out)")
    if args.kind == "spiral":
        ds = data.gen_spiral(n_per_arm=args.n, arms=args.arms, noise_sd=args.noise, seed=args.seed)
    else:
        ds = data.gen_dot_video(num_seq=args.num_seq, T=args.len, width_px=args.width, dot_sd=args.dot_sd, seed=args.seed)
    try:
        data.write(args.out, ds)
    except OSError as e:
        raise UsageError(f"cannot write {args.out}: {e.strerror}") from None
    print(f"{args.out} {ds.kind} shape={'x'.join(map(str, ds.shape))}")
    return EXIT_OK


def _resolve_run(args) -> RunConfig:
    run = read_config(args.config) if args.config else RunConfig()
    flags = dict(
        model=dict(structure=args.model, K=args.K, m=args.latent_dim, seed=args.model_seed),
        optimizer=dict(step_theta=args.step_theta, step_net=args.step_net, epochs=args.epochs,
                       batch_size=args.batch_size, seed=args.seed, grad_mode=args.grad_mode, max_steps=args.max_steps),
        io=dict(data=args.data, out_dir=args.out_dir, checkpoint_every=args.checkpoint_every),
    )
    for section, kv in flags.items():
        for k, v in kv.items():
            if v is not None:
                run.set(section, k, v)
    if args.hidden is not None:
        run.set("model", "enc_hidden", args.hidden)
        run.set("model", "dec_hidden", args.hidden)
    for item in args.set or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        if section not in ("model", "optimizer", "io"):
            raise ConfigError(f"unknown config section [{section}]")
        run.set(section, key, value)
    return run


def cmd_train(args):
    run = _resolve_run(args)
    run.validate()
    out_dir = run.io["out_dir"]
    if not out_dir:
        raise UsageError("an output directory is required (--out-dir or [io] out_dir)")
    ds = _load_dataset(run.io["data"])
    N = ds.data.shape[0]
    p = ds.data.shape[-1]
    run.model_config(N, p)
    tc = run.train_config()
    if args.resume:
        start = _load_checkpoint(args.resume)
        model, step0 = start.model, start.step
        if model.N != N:
            raise UsageError(f"checkpoint was trained on N={model.N}, dataset has N={N}")
    else:
        model, step0 = models.build(run.model_config(N, p)), 0
    _structure_matches(model, ds)
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "checkpoint.svaecp")
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    every = run.io["checkpoint_every"]
    run_dict = run.to_dict()

    def save(m, step):
        ckpt_io.save(ckpt_path, ckpt_io.Checkpoint(m, step, tc.seed, run_dict))

    if not args.resume:
        save(model, 0)
    keys = ("step", "bound", "recon", "kl_local", "kl_global", "wallclock_ms", "grad_mode", "halvings", "step_error")
    with open(metrics_path, "a" if args.resume else "w", encoding="utf-8") as mf:

        def callback(step, m, record):
            mf.write(json.dumps({k: record[k] for k in keys}) + "\n")
            mf.flush()
            if every and step % every == 0:
                save(m, step)

        try:
            model, metrics = core.train(model, ds.data, tc, callback=callback, start_step=step0)
        except NumericalError as e:
            print(f"error: numeric collapse: {e}; last checkpoint kept at {ckpt_path}", file=sys.stderr)
            return EXIT_NUMERIC
    final_step = step0 + len(metrics)
    save(model, final_step)
    _write_csv(
        os.path.join(out_dir, "curve.csv"),
        ["step", "bound", "recon", "kl_local", "kl_global", "halvings", "step_error"],
        [[r["step"], r["bound"], r["recon"], r["kl_local"], r["kl_global"], r["halvings"], int(r["step_error"])] for r in metrics],
    )
    errors = sum(r["step_error"] for r in metrics)
    backtracks = sum(r["halvings"] > 0 for r in metrics)
    print(f"trained {len(metrics)} steps (total {final_step}); step errors: {errors}; backtracking steps: {backtracks}")
    print(f"checkpoint: {ckpt_path}")
    print(f"metrics: {metrics_path}")
    return EXIT_OK


def _forecast_scores(model, seqs, prefix, seed):
    """Per-sequence noiseless forecast MSE and repeat-last-frame MSE."""
    T = seqs.shape[1]
    if not 1 <= prefix < T:
        raise UsageError(f"prefix must lie in [1, {T - 1}]")
    out = []
    for s, seq in enumerate(seqs):
        req = models.ForecastRequest(seq[:prefix], horizon=T - prefix, noiseless=True, seeds=(seed + s,))
        fc = models.forecast(model, req)
        truth = seq[prefix:]
        out.append((float(np.mean((fc.frames[0] - truth) ** 2)), float(np.mean((seq[prefix - 1] - truth) ** 2))))
    return out


def cmd_eval(args):
    ck = _load_checkpoint(args.checkpoint)
    ds = _load_dataset(args.data)
    model = ck.model
    _structure_matches(model, ds)
    rep = core.evaluate_bound(model, ds.data, seed=args.seed)
    n = ds.data.shape[0] * (ds.data.shape[1] if ds.data.ndim == 3 else 1)
    report = dict(
        structure=model.structure,
        step=ck.step,
        bound=rep.bound,
        recon=rep.recon,
        kl_local=rep.kl_local,
        kl_global=rep.kl_global,
        kl_gamma=rep.kl_gamma,
        local_bound_per_point=(rep.recon - rep.kl_local) / n,
    )
    if model.structure == "gmm":
        _, labels = models.cluster_assignments(model, ds.data)
        report["cluster_sizes"] = np.bincount(labels, minlength=np.asarray(model.eta["pi"].data).shape[0]).tolist()
        if "labels" in ds.extras:
            from sklearn.metrics import adjusted_rand_score

            report["ari"] = float(adjusted_rand_score(ds.extras["labels"], labels))
    elif model.structure in core.SEQUENTIAL:
        prefix = args.prefix if args.prefix is not None else ds.data.shape[1] // 2
        scores = _forecast_scores(model, ds.data, prefix, args.seed)
        model_mse, base_mse = np.array(scores).T
        report.update(
            forecast_prefix=prefix,
            forecast_mse=float(model_mse.mean()),
            repeat_last_mse=float(base_mse.mean()),
            forecast_win_fraction=float(np.mean(model_mse < base_mse)),
        )
    _dump(report, args.out)
    return EXIT_OK


def cmd_forecast(args):
    ck = _load_checkpoint(args.checkpoint)
    ds = _load_dataset(args.data)
    model = ck.model
    if model.structure not in core.SEQUENTIAL:
        raise UsageError(f"forecast needs an lds or slds checkpoint, not {model.structure}")
    _structure_matches(model, ds)
    if not args.out_dir:
        raise UsageError("missing output directory (--out-dir)")
    T = ds.data.shape[1]
    idx = list(range(ds.data.shape[0])) if args.seq is None else [args.seq]
    if any(not 0 <= i < ds.data.shape[0] for i in idx):
        raise UsageError(f"sequence index out of range [0, {ds.data.shape[0]})")
    if not 1 <= args.prefix <= T:
        raise UsageError(f"prefix must lie in [1, {T}]")
    os.makedirs(args.out_dir, exist_ok=True)
    frames, latent_rows, frame_rows = [], [], []
    for i in idx:
        seq = ds.data[i]
        seeds = tuple(args.seed + 1000 * i + k for k in range(args.samples))
        req = models.ForecastRequest(seq[: args.prefix], args.horizon, args.samples, args.noiseless, seeds)
        fc = models.forecast(model, req)
        frames.append(fc.frames)
        for k in range(args.samples):
            for t in range(args.horizon):
                latent_rows.append([i, k, args.prefix + t, *fc.latents[k, t].tolist()])
                tt = args.prefix + t
                for px in range(model.p):
                    true = float(seq[tt, px]) if tt < T else ""
                    frame_rows.append([i, k, tt, px, float(fc.frames[k, t, px]), true])
    stacked = np.concatenate(frames)
    out = data.Dataset("frame-seq", stacked, seed=args.seed,
                       params=dict(prefix=args.prefix, horizon=args.horizon, samples=args.samples,
                                   noiseless=args.noiseless, sequences=idx))
    frames_path = os.path.join(args.out_dir, "forecast.svaeds")
    data.write(frames_path, out)
    _write_csv(os.path.join(args.out_dir, "latents.csv"), ["seq", "sample", "t"] + [f"x{j}" for j in range(model.m)], latent_rows)
    _write_csv(os.path.join(args.out_dir, "frames.csv"), ["seq", "sample", "t", "pixel", "predicted", "true"], frame_rows)
    print(f"{frames_path} frame-seq shape={'x'.join(map(str, stacked.shape))}")
    return EXIT_OK


def cmd_gradcheck(args):
    if bool(args.checkpoint) != bool(args.data):
        raise UsageError("gradcheck needs both --checkpoint and --data, or neither")
    if args.checkpoint:
        ck = _load_checkpoint(args.checkpoint)
        ds = _load_dataset(args.data)
        _structure_matches(ck.model, ds)
        y = ds.data[: args.batch] if ds.data.ndim == 2 else ds.data[:1]
        results = gradcheck.run_suite(ck.model, y, seed=args.seed)
    else:
        results = gradcheck.run_suite(seed=args.seed, instances=args.instances)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    p = _Parser(prog="svae", description="Structured variational autoencoders with conjugate latent models.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("kind", choices=("spiral", "dot"))
    g.add_argument("--out", help="output path (SVAEDS1)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--arms", type=int, default=2)
    g.add_argument("--n", type=int, default=500, help="points per arm")
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--num-seq", type=int, default=80)
    g.add_argument("--len", type=int, default=50)
    g.add_argument("--width", type=int, default=20)
    g.add_argument("--dot-sd", type=float, default=1.5)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model, writing checkpoints and JSON-lines metrics")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out-dir")
    t.add_argument("--model", choices=core.STRUCTURES)
    t.add_argument("--K", type=int)
    t.add_argument("--latent-dim", type=int)
    t.add_argument("--hidden", help="comma-separated hidden widths for both networks")
    t.add_argument("--model-seed", type=int)
    t.add_argument("--grad-mode", choices=("natural", "standard"))
    t.add_argument("--step-theta", type=float)
    t.add_argument("--step-net", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--resume", help="continue from a checkpoint")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="bound and task metrics for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--prefix", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("forecast", help="condition on a prefix and roll the latent chain forward")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--out-dir")
    f.add_argument("--seq", type=int)
    f.add_argument("--prefix", type=int, default=25)
    f.add_argument("--horizon", type=int, default=25)
    f.add_argument("--samples", type=int, default=1)
    f.add_argument("--noiseless", action="store_true")
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_forecast)

    c = sub.add_parser("gradcheck", help="finite-difference and SVI-equivalence checks")
    c.add_argument("--checkpoint")
    c.add_argument("--data")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--instances", type=int, default=5)
    c.add_argument("--batch", type=int, default=20)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, FormatError, InputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"error: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except SvaeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
