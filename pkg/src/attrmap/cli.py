"""Command line entry point: ``attrmap {synth,train,eval,cam}``.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .data import SYNTH_KINDS, ManifestError, SynthSpec, load_dataset, synth_generate, write_dataset
from .evaluation import evaluate
from .maps import cam, grad_cam, render_overlay
from .model import ConfigError, TapNet, TapNetConfig, load, save
from .ppm import PPMError, read_ppm
from .tensor import FormatError, ShapeError, save_tensor
from .train import TrainConfig, fit, resume

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

MODEL_KEYS = {f.name for f in dataclasses.fields(TapNetConfig)} - {"attribute_names"}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


class UsageError(Exception):
    pass


def parse_config_text(text: str) -> dict:
    """``key=value`` lines with ``#`` comments -> dict of strings."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"config line {lineno}: expected key=value, got {raw!r}")
        key = key.strip()
        if key not in MODEL_KEYS | TRAIN_KEYS:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        values[key] = value.strip()
    return values


def build_configs(values: dict) -> tuple[TapNetConfig, TrainConfig]:
    model_text = "".join(f"{k}={v}\n" for k, v in values.items() if k in MODEL_KEYS)
    train_cfg = TrainConfig.from_strings({k: v for k, v in values.items() if k in TRAIN_KEYS})
    return TapNetConfig.from_text(model_text), train_cfg


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file or directory: {path}")
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    samples = synth_generate(SynthSpec(args.kind, args.count, args.size, args.seed))
    path = write_dataset(samples, args.out, prefix=args.kind)
    print(f"wrote {len(samples)} images and {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    values = {}
    if args.config:
        values.update(parse_config_text(_require(args.config).read_text()))
    for item in args.set or []:
        values.update(parse_config_text(item))
    flags = {"epochs": args.epochs, "batch_size": args.batch_size, "learning_rate": args.learning_rate,
             "optimizer": args.optimizer, "seed": args.seed}
    values.update({k: str(v) for k, v in flags.items() if v is not None})
    model_cfg, train_cfg = build_configs(values)
    train = load_dataset(_require(args.data))
    val = load_dataset(_require(args.val)) if args.val else train
    out = Path(args.out)
    if args.resume:
        _, result = resume(_require(out / "last.tapn"), train, val, train_cfg, out)
    else:
        net = TapNet.build(model_cfg, seed=train_cfg.seed)
        result = fit(net, train, val, train_cfg, out)
    print(f"{len(result.log.rows)} epoch(s) logged; best epoch {result.best_epoch}; "
          f"checkpoints in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net = load(_require(args.model))
    samples = load_dataset(_require(args.data))
    size = samples[0].image.shape[2] if samples else None
    if size is not None and size != net.config.input_size:
        raise ConfigError(f"model expects {net.config.input_size} px images, data has {size} px")
    report = evaluate(net, samples)
    print(report.to_text(), end="")
    if args.out:
        Path(args.out).write_text(report.to_csv())
    if args.predictions:
        names = net.config.attribute_names
        lines = ["path," + ",".join(names)]
        for s, row in zip(samples, report.predictions):
            lines.append(s.meta["path"] + "," + ",".join(repr(float(v)) for v in row))
        Path(args.predictions).write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_cam(args) -> int:
    net = load(_require(args.model))
    names = net.config.attribute_names
    if args.attribute not in names:
        raise UsageError(f"unknown attribute {args.attribute!r}; valid names: {', '.join(names)}")
    image = read_ppm(_require(args.image))
    if image.shape[1:] != (net.config.input_size,) * 2:
        raise ShapeError(f"image is {image.shape[2]}x{image.shape[1]}, model expects "
                         f"{net.config.input_size}x{net.config.input_size}")
    if args.method == "cam":
        amap = cam(net, net.forward(image[None]), args.attribute)
    else:
        amap = grad_cam(net, image, args.attribute)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = out / f"{args.attribute}_{args.method}"
    stem.with_suffix(".ppm").write_bytes(render_overlay(image, amap, args.alpha))
    stem.with_suffix(".txt").write_text(amap.sidecar())
    save_tensor(stem.with_suffix(".tnsr"), amap.grid)
    print(f"{args.attribute} score {amap.score:.6f}; wrote {stem}.ppm")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attrmap", description="Multi-task attribute regression and activation maps.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--kind", required=True, choices=SYNTH_KINDS)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on a manifest")
    t.add_argument("--data", required=True, help="training manifest.csv")
    t.add_argument("--val", help="validation manifest.csv (defaults to the training set)")
    t.add_argument("--config", help="key=value file of model and training settings")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--optimizer", choices=("adam", "sgd_momentum"))
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", action="store_true", help="continue from OUT/last.tapn")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="Spearman rho per attribute")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="write the report as CSV")
    e.add_argument("--predictions", help="write per-image predictions as CSV")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("cam", help="render an attribute activation map")
    c.add_argument("--model", required=True)
    c.add_argument("--image", required=True)
    c.add_argument("--attribute", required=True)
    c.add_argument("--method", choices=("cam", "gradcam"), default="cam")
    c.add_argument("--alpha", type=float, default=0.5)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_cam)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"attrmap: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ManifestError, FormatError, PPMError, ShapeError, ConfigError, OSError, ValueError) as exc:
        print(f"attrmap: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
