"""Command line entry point: train, eval, predict, inspect, bench, pareto."""
from __future__ import annotations

import argparse
import contextlib
import os
import platform
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import checkpoint as ckpt_io
from .data import (AugmentConfig, DataError, Recipe, ManifestEntry, read_manifest,
                   save_depth_png, save_rgb_png, to_arrays, write_manifest)
from .engine import TrainConfig, evaluate, predict, train
from .loss import LossConfig
from .metrics import CSV_HEADER, NoValidPixelsError
from .model import ArchitectureConfig, build, count, stage_widths
from .pareto import ParetoInputError, pareto_front, read_points_csv, render_svg, write_points_csv
from .tensor import NumericError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# -- config file --------------------------------------------------------------------

_CONFIG_TYPES = {
    "variant": str, "backbone_width": int, "input_height": int, "input_width": int,
    "epochs": int, "lr0": float, "lr_decay_factor": float, "lr_decay_every_epochs": int,
    "batch_size": int, "momentum": float, "loss": str, "berhu_fraction": float,
    "seed": int, "augment": str, "preset": str,
}


def parse_config(text: str, source: str = "<config>") -> Dict[str, object]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: Dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _CONFIG_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = _CONFIG_TYPES[key](value)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad value {value!r} for {key}") from None
    return out


def load_config(args) -> Dict[str, object]:
    cfg: Dict[str, object] = {}
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        cfg.update(parse_config(text, args.config))
    for key in ("variant", "seed", "epochs", "backbone_width", "batch_size", "lr0", "loss"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    return cfg


def arch_from(cfg: Dict[str, object], hw=None) -> ArchitectureConfig:
    h, w = hw if hw is not None else (cfg.get("input_height", 228), cfg.get("input_width", 304))
    kw = {}
    if "backbone_width" in cfg:
        kw["backbone_width"] = stage_widths(int(cfg["backbone_width"]))
    try:
        return ArchitectureConfig(str(cfg.get("variant", "base")), (int(h), int(w), 3), **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def train_config_from(cfg: Dict[str, object]) -> TrainConfig:
    keys = ("epochs", "lr0", "lr_decay_factor", "lr_decay_every_epochs", "batch_size",
            "momentum", "seed")
    kw = {k: cfg[k] for k in keys if k in cfg}
    try:
        kw["loss"] = LossConfig(str(cfg.get("loss", "hybrid")), float(cfg.get("berhu_fraction", 0.2)))
        preset = cfg.get("preset", "default")
        if preset == "make3d":
            return TrainConfig.make3d(**kw)
        if preset != "default":
            raise ValueError(f"unknown preset {preset!r}")
        return TrainConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _parse_hw(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"expected HxW, got {text!r}") from None
    return h, w


# -- commands ----------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args)
    if not args.manifest:
        raise ConfigError("train needs --manifest")
    tcfg = train_config_from(cfg)
    dataset = read_manifest(args.manifest)
    first = dataset[0]
    model = build(arch_from(cfg, first.hw))
    aug = AugmentConfig(seed=tcfg.seed) if str(cfg.get("augment", "no")).lower() in ("1", "yes", "true") else None
    out = Path(args.out or "run")
    log = train(model, dataset, tcfg, out_dir=out, augment_cfg=aug, resume=args.resume)
    last = log.epochs[-1][1] if log.epochs else None
    if last is not None:
        print(f"trained {len(log.steps)} steps; final rmse {last.rmse:.6g}; checkpoints in {out}")
    return EXIT_OK


def _load_checkpoint_arg(args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    if not Path(args.checkpoint).exists():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    return ckpt_io.load_model(args.checkpoint)


def cmd_eval(args) -> int:
    model, _ = _load_checkpoint_arg(args)
    if not args.manifest:
        raise ConfigError("eval needs --manifest")
    report = evaluate(model, read_manifest(args.manifest), cap_m=args.cap,
                      rel_denominator=args.rel_denominator)
    label = Path(args.manifest).stem if args.label is None else args.label
    text = CSV_HEADER + "\n" + report.to_csv_row(label) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


def cmd_predict(args) -> int:
    model, _ = _load_checkpoint_arg(args)
    if not args.manifest:
        raise ConfigError("predict needs --manifest")
    manifest = read_manifest(args.manifest)
    out = Path(args.out or "predictions")
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, entry in enumerate(manifest.entries):
        sample = manifest[i]
        rgb, _, _ = to_arrays([sample])
        depth = predict(model, rgb)[0, 0]
        rgb_name, depth_name = f"{i:05d}_rgb.png", f"{i:05d}_pred.png"
        save_rgb_png(out / rgb_name, sample.rgb)
        save_depth_png(out / depth_name, depth, entry.depth_divisor)
        entries.append(ManifestEntry(rgb_name, depth_name, entry.depth_divisor))
    write_manifest(out / "manifest.tsv", entries, Recipe())
    print(f"wrote {len(entries)} depth maps to {out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    cfg = load_config(args)
    hw = _parse_hw(args.input_size) if args.input_size else None
    arch = arch_from(cfg, hw)
    report = count(build(arch), arch.input_shape)
    lines = ["layer,kind,params,macs"] + [f"{n},{k},{p},{m}" for n, k, p, m in report.rows()]
    lines.append(f"total,,{report.parameters},{report.macs}")
    csv_text = "\n".join(lines) + "\n"
    name_w = max(len(r[0]) for r in report.rows())
    print(f"{'layer':<{name_w}}  {'kind':<8} {'params':>12} {'MACs':>16}")
    for n, k, p, m in report.rows():
        print(f"{n:<{name_w}}  {k:<8} {p:>12,} {m:>16,}")
    h, w, _ = arch.input_shape
    print(f"{arch.variant} @ {h}x{w}: {report.parameters:,} parameters "
          f"({report.parameters / 1e6:.2f} M), {report.macs:,} MACs ({report.macs / 1e9:.2f} G)")
    if args.out:
        Path(args.out).write_text(csv_text)
    return EXIT_OK


def device_label() -> str:
    return f"cpu:{platform.machine()}:{platform.processor() or 'unknown'}:numpy-{np.__version__}"


def bench_latency(model, input_shape, iters: int, warmup: int) -> Dict[str, float]:
    if iters < 1:
        raise ConfigError("iters must be >= 1")
    if warmup < 0:
        raise ConfigError("warmup must be >= 0")
    h, w = input_shape
    x = np.random.default_rng(0).random((1, 3, h, w), dtype=np.float32)
    samples = []
    with _thread_limit(1):
        for i in range(warmup + iters):
            t0 = time.perf_counter()
            predict(model, x)
            dt = (time.perf_counter() - t0) * 1e3
            if i >= warmup:
                samples.append(dt)
    arr = np.asarray(samples)
    return {"n": len(samples), "mean_ms": float(arr.mean()), "median_ms": float(np.median(arr)),
            "p95_ms": float(np.percentile(arr, 95)), "min_ms": float(arr.min())}


def cmd_bench(args) -> int:
    if args.checkpoint:
        model, _ = _load_checkpoint_arg(args)
    else:
        model = build(arch_from(load_config(args)))
    hw = _parse_hw(args.input_size) if args.input_size else model.config.input_shape[:2]
    stats = bench_latency(model, hw, args.iters, args.warmup)
    macs = count(model, hw).macs
    print(f"device,{device_label()}")
    print("input,iters,warmup,mean_ms,median_ms,p95_ms,macs")
    print(f"{hw[0]}x{hw[1]},{stats['n']},{args.warmup},{stats['mean_ms']:.4f},"
          f"{stats['median_ms']:.4f},{stats['p95_ms']:.4f},{macs}")
    return EXIT_OK


def cmd_pareto(args) -> int:
    if not args.input:
        raise ConfigError("pareto needs --input")
    try:
        text = Path(args.input).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {args.input}: {exc}") from exc
    points = read_points_csv(text)
    front, dominated = pareto_front(points)
    csv_text = write_points_csv(front)
    if args.out:
        Path(args.out).write_text(csv_text)
    else:
        sys.stdout.write(csv_text)
    if args.svg:
        Path(args.svg).write_text(render_svg(points, front))
    print(f"{len(front)} of {len(points)} points on the front", file=sys.stderr)
    return EXIT_OK


# -- plumbing --------------------------------------------------------------------------

@contextlib.contextmanager
def _thread_limit(n: Optional[int]):
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--manifest", help="dataset manifest (rgb<TAB>depth<TAB>divisor)")
    common.add_argument("--checkpoint", help="model checkpoint (.mxnt)")
    common.add_argument("--seed", type=int)
    common.add_argument("--cap", type=float, help="evaluate only ground truth <= this many metres")
    common.add_argument("--variant", choices=["small", "base", "large"])
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--backbone-width", dest="backbone_width", type=int,
                        help="width of the first backbone stage (default 32)")

    p = argparse.ArgumentParser(prog="mobilexnet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr0", type=float)
    t.add_argument("--loss", choices=["l1", "l2", "berhu", "hybrid"])
    t.add_argument("--resume", help="continue from a checkpoint written by train")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--rel-denominator", choices=["groundtruth", "prediction"], default="groundtruth")
    e.add_argument("--label")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", parents=[common], help="write 16-bit depth PNGs")
    pr.set_defaults(func=cmd_predict)

    i = sub.add_parser("inspect", parents=[common], help="parameter and MAC report")
    i.add_argument("--input-size", help="HxW, default 228x304")
    i.set_defaults(func=cmd_inspect)

    b = sub.add_parser("bench", parents=[common], help="forward latency")
    b.add_argument("--input-size", help="HxW")
    b.add_argument("--iters", type=int, default=20)
    b.add_argument("--warmup", type=int, default=3)
    b.set_defaults(func=cmd_bench)

    pa = sub.add_parser("pareto", parents=[common], help="Pareto front of label,error,time_ms CSV")
    pa.add_argument("--input", help="input CSV")
    pa.add_argument("--svg", help="write scatter plot here")
    pa.set_defaults(func=cmd_pareto)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    threads = os.environ.get("MOBILEX_THREADS")
    try:
        limit = int(threads) if threads else None
        if limit is not None and limit < 1:
            raise ValueError
    except ValueError:
        print(f"error: MOBILEX_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with _thread_limit(limit):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ParetoInputError, NoValidPixelsError, ckpt_io.CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
