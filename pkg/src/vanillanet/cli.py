"""Command-line driver: train, fuse, verify, eval, bench, count, export-report.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .architecture import VARIANTS, ArchSpec, build, flop_breakdown, param_count
from .bench import benchmark, paired_benchmark
from .checkpoint import CheckpointError, load_checkpoint, load_into, save_checkpoint
from .data import (
    DataFormatError,
    Dataset,
    channel_stats,
    find_cifar10,
    find_mnist,
    pad_to,
    standardize,
    synthetic_blobs,
)
from .fusion import FusionError, fuse_network, verify_equivalence
from .ops import NumericalError, ShapeError
from .training import TrainConfig, evaluate, fit, make_optimizer

SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write_json(path, doc: dict):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def _emit(doc: dict, out: str | None):
    if out:
        _write_json(out, doc)
    print(json.dumps(doc, indent=2, sort_keys=True))


# --------------------------------------------------------------------------
# shared argument groups
# --------------------------------------------------------------------------

def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--deterministic", action="store_true",
                   help="limit BLAS to one thread so repeated runs are bitwise identical")
    p.add_argument("--config", help="JSON file of option defaults; explicit flags win")


def _arch(p):
    g = p.add_argument_group("architecture")
    g.add_argument("--variant", type=int, default=6)
    g.add_argument("--width-scale", type=float, default=1.0)
    g.add_argument("--act-n", type=int, default=3)
    g.add_argument("--input-size", type=int, default=None, help="square input side (default: from data, else 224)")
    g.add_argument("--in-channels", type=int, default=3)
    g.add_argument("--num-classes", type=int, default=1000)
    g.add_argument("--shortcut", choices=("none", "before_act", "after_act"), default="none")
    g.add_argument("--no-deep-train", dest="deep_train", action="store_false", default=True)
    g.add_argument("--layout", choices=("widen_first", "widen_last"), default="widen_first")
    g.add_argument("--skip-stage3-pool", action="store_true")
    g.add_argument("--act-after-pool", action="store_true")


def _data(p):
    g = p.add_argument_group("data")
    g.add_argument("--data", choices=("synthetic", "mnist", "cifar10"), default="synthetic")
    g.add_argument("--data-dir", default=None)
    g.add_argument("--samples", type=int, default=1000, help="synthetic training samples")
    g.add_argument("--test-samples", type=int, default=500, help="synthetic test samples")
    g.add_argument("--standardize", action="store_true")


def _spec_from_args(a, data: Dataset | None = None, mode: str = "train") -> ArchSpec:
    if a.variant not in VARIANTS:
        raise UsageError(f"--variant must be one of {list(VARIANTS)}, got {a.variant}")
    if data is not None:
        size = data.images.shape[2]
        in_ch, classes = data.images.shape[1], data.num_classes
    else:
        size = a.input_size or 224
        in_ch, classes = a.in_channels, a.num_classes
    try:
        return ArchSpec(variant=a.variant, width_scale=a.width_scale, input_size=(size, size),
                        in_channels=in_ch, num_classes=classes, act_n=a.act_n, mode=mode,
                        shortcut=a.shortcut, deep_train=a.deep_train, layout=a.layout,
                        skip_stage3_pool=a.skip_stage3_pool, act_after_pool=a.act_after_pool)
    except (ValueError, ShapeError) as exc:
        raise UsageError(str(exc)) from exc


def load_data(kind: str, data_dir: str | None, seed: int = 0, samples: int = 1000,
              test_samples: int = 500, size: int | None = None) -> tuple[Dataset, Dataset]:
    """Train and test splits, padded to a square side divisible by 32."""
    if kind == "synthetic":
        side = size or 32
        train = synthetic_blobs(10, samples, side, seed=seed)
        test = synthetic_blobs(10, test_samples, side, seed=seed + 10_000, split="test")
    else:
        if data_dir is None:
            raise DataFormatError(f"--data {kind} needs --data-dir")
        finder = find_mnist if kind == "mnist" else find_cifar10
        train, test = finder(data_dir, "train"), finder(data_dir, "test")
    side = size or -(-train.images.shape[2] // 32) * 32
    return pad_to(train, side), pad_to(test, side)


def _prepare_data(a) -> tuple[Dataset, Dataset, dict]:
    train, test = load_data(a.data, a.data_dir, a.seed, a.samples, a.test_samples, a.input_size)
    info = {"kind": a.data, "dir": a.data_dir, "train_size": len(train), "test_size": len(test),
            "input_size": list(train.images.shape[2:]), "standardized": bool(a.standardize)}
    if a.standardize:
        stats = channel_stats(train)
        train, test = standardize(train, stats), standardize(test, stats)
        info["stats"] = {"mean": stats["mean"], "std": stats["std"]}
    return train, test, info


def _apply_stats(ds: Dataset, data_meta: dict | None) -> Dataset:
    if data_meta and data_meta.get("standardized"):
        return standardize(ds, data_meta["stats"])
    return ds


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def run_id(config: dict) -> str:
    """Git-style short hash of the canonical config."""
    return hashlib.sha1(json.dumps(config, sort_keys=True).encode()).hexdigest()[:12]


def cmd_train(a) -> int:
    t0 = time.perf_counter()
    train, test, data_info = _prepare_data(a)
    spec = _spec_from_args(a, train)
    try:
        config = TrainConfig(epochs=a.epochs, deep_epochs=a.deep_epochs, base_lr=a.lr,
                             weight_decay=a.weight_decay, batch_size=a.batch_size, optimizer=a.optimizer,
                             label_smoothing=a.label_smoothing, loss=a.loss, seed=a.seed, dtype=a.dtype,
                             warmup_epochs=a.warmup_epochs, flip_prob=a.flip_prob,
                             crop_padding=a.crop_padding, prefetch=a.prefetch)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    graph = build(spec, seed=a.seed, dtype=np.dtype(a.dtype))
    init_report = load_into(graph, a.init_from) if a.init_from else None
    os.makedirs(a.out, exist_ok=True)
    full_config = {"arch": spec.to_dict(), "train": config.to_dict(), "data": data_info}
    rid = run_id(full_config)
    epoch_times = []
    last = [time.perf_counter()]

    def on_epoch(row):
        now = time.perf_counter()
        epoch_times.append(now - last[0])
        last[0] = now
        print(f"epoch {row['epoch']:3d}  loss {row['loss']:.4f}  acc {row['acc']:.4f}  "
              f"test_acc {row.get('test_acc', float('nan')):.4f}  lam {row['lam']:.3f}  lr {row['lr']:.2e}",
              flush=True)

    optimizer = make_optimizer(config)
    rows = fit(graph, train, config, test=test, optimizer=optimizer, callback=on_epoch)
    ckpt = os.path.join(a.out, "checkpoint.vnck")
    meta = {"epoch": config.epochs, "seed": a.seed, "run_id": rid, "data": data_info,
            "train": config.to_dict()}
    save_checkpoint(graph, meta, ckpt, optimizer=optimizer)
    manifest = {
        "schema_version": SCHEMA_VERSION, "run_id": rid, "seed": a.seed, "config": full_config,
        "epochs": rows, "checkpoint": os.path.abspath(ckpt),
        "desk_profile": {"skip_stage3_pool": spec.skip_stage3_pool, "input_size": list(spec.input_size)},
        "timings": {"total_s": time.perf_counter() - t0, "per_epoch_s": epoch_times},
        "init_from": None if init_report is None else {"path": a.init_from, **init_report},
        "version": __version__,
    }
    _write_json(os.path.join(a.out, "manifest.json"), manifest)
    print(f"wrote {ckpt} and manifest (run {rid})")
    return EXIT_OK


def cmd_fuse(a) -> int:
    graph, meta = load_checkpoint(a.checkpoint_in)
    fused, report = fuse_network(graph, num_samples=a.samples, seed=a.seed)
    out_meta = {k: v for k, v in meta.items() if k not in ("arch", "lam", "tensor_count", "format_version",
                                                           "optimizer", "optim_state")}
    out_meta["fused_from"] = os.path.abspath(a.checkpoint_in)
    save_checkpoint(fused, out_meta, a.checkpoint_out)
    doc = report.to_dict()
    doc.update(params_before=param_count(graph), params_after=param_count(fused),
               noop=graph.spec.mode == "deploy")
    _emit(doc, a.report or f"{a.checkpoint_out}.report.json")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_verify(a) -> int:
    g1, _ = load_checkpoint(a.reference)
    g2, _ = load_checkpoint(a.candidate)
    if g1.spec.input_size != g2.spec.input_size:
        raise DataFormatError("checkpoints disagree on input size")
    report = verify_equivalence(g1, g2, num_samples=a.samples, tol=a.tol, dtype=np.dtype(a.dtype), seed=a.seed)
    _emit(report.to_dict(), a.out)
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_eval(a) -> int:
    graph, meta = load_checkpoint(a.checkpoint)
    data_meta = meta.get("data") or {}
    kind = a.data or data_meta.get("kind", "synthetic")
    data_dir = a.data_dir or data_meta.get("dir")
    _, test = load_data(kind, data_dir, a.seed, a.samples, a.test_samples, graph.spec.input_size[0])
    test = _apply_stats(test, data_meta)
    loss, acc = evaluate(graph, test, batch_size=a.batch_size)
    if not np.isfinite(loss):
        raise NumericalError("non-finite evaluation loss")
    _emit({"schema_version": SCHEMA_VERSION, "checkpoint": a.checkpoint, "data": kind, "samples": len(test),
           "loss": loss, "acc": acc}, a.out)
    return EXIT_OK


def cmd_bench(a) -> int:
    if a.iters < 1:
        raise UsageError("--iters must be >= 1")
    if a.warmup < 0 or a.batch_size < 1:
        raise UsageError("--warmup must be >= 0 and --batch-size >= 1")
    graph, _ = load_checkpoint(a.checkpoint)
    doc = {"schema_version": SCHEMA_VERSION, "checkpoint": a.checkpoint, "mode": graph.spec.mode}
    if a.compare_fused and graph.spec.mode == "train":
        fused, _ = fuse_network(graph, num_samples=1, seed=a.seed)
        unfused_r, fused_r = paired_benchmark(graph, fused, a.batch_size, a.iters, a.warmup, a.seed)
        doc.update(unfused=unfused_r.to_dict(), fused=fused_r.to_dict(),
                   speedup=unfused_r.median_ms / fused_r.median_ms)
    else:
        doc["latency"] = benchmark(graph, a.batch_size, a.iters, a.warmup, a.seed).to_dict()
    _emit(doc, a.out)
    return EXIT_OK


def count_table(spec: ArchSpec, literal_series: bool = False) -> dict:
    train = build(spec.with_(mode="train"), init=False)
    deploy = build(spec.with_(mode="deploy"), init=False)
    fb = flop_breakdown(deploy, literal_series=literal_series)
    return {
        "schema_version": SCHEMA_VERSION,
        "arch": spec.to_dict(),
        "params_train": param_count(train),
        "params_deploy": param_count(deploy),
        "flops": {"conv": fb.conv, "series": fb.series, "total": fb.total, "pool": fb.pool,
                  "batchnorm_train": flop_breakdown(train).batchnorm},
        "series_convention": "n^2" if literal_series else "(2n+1)^2",
        "blocks": len(spec.plan()),
        "depth": deploy.depth,
    }


def cmd_count(a) -> int:
    doc = count_table(_spec_from_args(a, mode="deploy"), a.literal_series)
    if a.format == "json" or a.out:
        if a.out:
            _write_json(a.out, doc)
        if a.format == "json":
            print(json.dumps(doc, indent=2, sort_keys=True))
            return EXIT_OK
    s = doc["arch"]
    print(f"VanillaNet-{s['variant']}  width x{s['width_scale']:g}  act_n={s['act_n']}  "
          f"input {s['input_size'][0]}x{s['input_size'][1]}")
    print(f"  blocks            {doc['blocks']:>16d}")
    print(f"  depth (deploy)    {doc['depth']:>16d}")
    print(f"  params (train)    {doc['params_train']:>16,d}")
    print(f"  params (deploy)   {doc['params_deploy']:>16,d}")
    print(f"  FLOPs conv        {doc['flops']['conv']:>16,d}")
    print(f"  FLOPs series act  {doc['flops']['series']:>16,d}")
    print(f"  FLOPs total       {doc['flops']['total']:>16,d}")
    return EXIT_OK


def cmd_export_report(a) -> int:
    graph, meta = load_checkpoint(a.checkpoint)
    doc = {"schema_version": SCHEMA_VERSION, "checkpoint": os.path.abspath(a.checkpoint),
           "meta": {k: v for k, v in meta.items() if k != "optim_state"},
           "counts": count_table(graph.spec)}
    if a.manifest:
        with open(a.manifest) as f:
            manifest = json.load(f)
        doc["run"] = {"run_id": manifest.get("run_id"), "epochs": manifest.get("epochs"),
                      "timings": manifest.get("timings")}
    _emit(doc, a.out)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vanillanet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train and write checkpoint + manifest")
    _common(t)
    _arch(t)
    _data(t)
    g = t.add_argument_group("optimization")
    g.add_argument("--epochs", type=int, default=10)
    g.add_argument("--deep-epochs", type=int, default=None)
    g.add_argument("--lr", type=float, default=2e-3)
    g.add_argument("--weight-decay", type=float, default=0.05)
    g.add_argument("--batch-size", type=int, default=128)
    g.add_argument("--optimizer", choices=("adamw", "sgd"), default="adamw")
    g.add_argument("--label-smoothing", type=float, default=0.1)
    g.add_argument("--loss", choices=("ce", "bce"), default="ce")
    g.add_argument("--warmup-epochs", type=float, default=0.0)
    g.add_argument("--flip-prob", type=float, default=0.0)
    g.add_argument("--crop-padding", type=int, default=0)
    g.add_argument("--prefetch", type=int, default=0)
    t.add_argument("--init-from", default=None, help="checkpoint whose matching tensors initialize the model")
    t.add_argument("--out", default="run")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fuse", help="fold BN and merge convs into a deploy checkpoint")
    _common(f)
    f.add_argument("checkpoint_in")
    f.add_argument("checkpoint_out")
    f.add_argument("--report", default=None)
    f.add_argument("--samples", type=int, default=8)
    f.set_defaults(func=cmd_fuse)

    v = sub.add_parser("verify", help="compare two checkpoints on seeded random inputs")
    _common(v)
    v.add_argument("reference")
    v.add_argument("candidate")
    v.add_argument("--samples", type=int, default=64)
    v.add_argument("--tol", type=float, default=None)
    v.add_argument("--out", default=None)
    v.set_defaults(func=cmd_verify)

    e = sub.add_parser("eval", help="test loss and accuracy of a checkpoint")
    _common(e)
    e.add_argument("checkpoint")
    e.add_argument("--data", choices=("synthetic", "mnist", "cifar10"), default=None)
    e.add_argument("--data-dir", default=None)
    e.add_argument("--samples", type=int, default=1000)
    e.add_argument("--test-samples", type=int, default=500)
    e.add_argument("--batch-size", type=int, default=256)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="per-forward latency")
    _common(b)
    b.add_argument("checkpoint")
    b.add_argument("--batch-size", type=int, default=1)
    b.add_argument("--iters", type=int, default=100)
    b.add_argument("--warmup", type=int, default=10)
    b.add_argument("--compare-fused", action="store_true")
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("count", help="parameter and FLOP table")
    _common(c)
    _arch(c)
    c.add_argument("--literal-series", action="store_true", help="count n^2 taps per series activation")
    c.add_argument("--format", choices=("table", "json"), default="table")
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_count)

    r = sub.add_parser("export-report", help="single JSON document describing a checkpoint and its run")
    _common(r)
    r.add_argument("checkpoint")
    r.add_argument("--manifest", default=None)
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_export_report)
    return p


def _config_defaults(argv: list[str]) -> dict:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return {}
    try:
        with open(known.config) as f:
            cfg = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {known.config}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    return {k.replace("-", "_"): v for k, v in cfg.items()}


def _parse(argv: list[str]) -> argparse.Namespace:
    parser = make_parser()
    defaults = _config_defaults(argv)
    if defaults:
        sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        for p in sub.choices.values():
            known = {a.dest for a in p._actions}
            unknown = set(defaults) - known
            if unknown and argv and argv[0] == p.prog.split()[-1]:
                raise UsageError(f"unknown config keys: {sorted(unknown)}")
            p.set_defaults(**{k: v for k, v in defaults.items() if k in known})
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    limiter = contextlib.nullcontext()
    if args.deterministic:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=1)
    try:
        with limiter:
            return args.func(args)
    except UsageError as exc:
        print(f"vanillanet {args.command}: error: {exc}\n"
              f"run 'vanillanet {args.command} --help' for usage", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, CheckpointError, FusionError, FileNotFoundError, ShapeError) as exc:
        print(f"vanillanet {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"vanillanet {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
