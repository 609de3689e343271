"""Command-line entry point: ``saekit {params,gradcheck,train,eval}``.

Exit codes: 0 success, 1 numerical-check failure, 2 usage/config/IO error.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .checkpoint import load_checkpoint, save_model
from .data import Dataset, load_dataset, normalize, resize_bilinear, synthetic_blobs
from .errors import SaeKitError
from .gradcheck import check_model_gradients
from .models import ARCHS, ModelSpec, build_model, param_breakdown
from .training import TrainConfig, evaluate, metrics_csv, train

log = logging.getLogger("saekit")

GRADCHECK_TOL = 1e-3

# effective-config keys, their section in a config file, and defaults
DEFAULTS = {
    "arch": ("model", None),
    "classes": ("model", None),
    "reduction": ("model", 32),
    "cardinality": ("model", None),
    "groups": ("model", None),
    "dataset": ("data", None),
    "synthetic": ("data", False),
    "per_class": ("data", 100),
    "image_size": ("data", None),
    "data_seed": ("data", 0),
    "optimizer": ("train", "sgd_momentum"),
    "lr": ("train", None),
    "momentum": ("train", 0.9),
    "weight_decay": ("train", 1e-4),
    "adam_beta1": ("train", 0.9),
    "adam_beta2": ("train", 0.999),
    "batch_size": ("train", 16),
    "epochs": ("train", 30),
    "lr_step": ("train", 15),
    "lr_decay": ("train", 0.1),
    "seed": ("train", 0),
    "out": ("output", "metrics.csv"),
    "checkpoint": ("output", None),
}

_INT_KEYS = {"classes", "reduction", "cardinality", "groups", "per_class", "image_size",
             "data_seed", "batch_size", "epochs", "lr_step", "seed"}
_FLOAT_KEYS = {"lr", "momentum", "weight_decay", "adam_beta1", "adam_beta2", "lr_decay"}
SYNTHETIC_CLASSES = 3
SYNTHETIC_HW = 16


class UsageError(SaeKitError):
    pass


def _coerce(key: str, raw: str):
    if key in _INT_KEYS:
        return int(raw)
    if key in _FLOAT_KEYS:
        return float(raw)
    if key == "synthetic":
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return raw


def read_config_file(path) -> dict:
    """Read an INI-style file; section names are informational, keys are global."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise UsageError(f"{path}: config file not found")
    values = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            key = key.replace("-", "_")
            if key not in DEFAULTS:
                raise UsageError(f"{path}: unknown key {section}.{key}")
            try:
                values[key] = _coerce(key, raw)
            except ValueError as exc:
                raise UsageError(f"{path}: bad value for {key}: {raw!r}") from exc
    return values


def effective_config(args: argparse.Namespace, keys) -> dict:
    cfg = {k: DEFAULTS[k][1] for k in keys}
    if getattr(args, "config", None):
        cfg.update({k: v for k, v in read_config_file(args.config).items() if k in cfg})
    for k in keys:
        v = getattr(args, k, None)
        if v is not None and v is not False:
            cfg[k] = v
    return cfg


def format_config(cfg: dict) -> str:
    return " ".join(f"{k}={cfg[k]}" for k in sorted(cfg))


def _spec(cfg: dict, default_classes: int | None = None) -> ModelSpec:
    classes = cfg.get("classes") or default_classes or 1000
    return ModelSpec(
        cfg["arch"],
        classes,
        reduction=cfg.get("reduction") or 32,
        cardinality=cfg.get("cardinality"),
        groups=cfg.get("groups"),
    )


def _load_data(cfg: dict) -> tuple[Dataset, Dataset | None]:
    if cfg.get("synthetic"):
        classes = cfg.get("classes") or SYNTHETIC_CLASSES
        train = synthetic_blobs(classes, cfg["per_class"], SYNTHETIC_HW, cfg["data_seed"])
        test = None
    elif cfg.get("dataset"):
        path = Path(cfg["dataset"])
        if not path.exists():
            raise UsageError(f"dataset path {path} does not exist")
        train, test = load_dataset(path, cfg.get("classes"))
    else:
        raise UsageError("one of --dataset or --synthetic is required")

    def prep(ds: Dataset | None) -> Dataset | None:
        if ds is None:
            return None
        images = ds.images
        if cfg.get("image_size"):
            images = resize_bilinear(images, (cfg["image_size"], cfg["image_size"]))
        return ds.with_images(normalize(images))

    return prep(train), prep(test)


# ---------------------------------------------------------------------------
# commands


def cmd_params(args) -> int:
    cfg = effective_config(args, ["arch", "classes", "reduction", "cardinality", "groups"])
    spec = _spec(cfg)
    info = param_breakdown(spec)
    base = param_breakdown(spec.plain_counterpart())
    print(f"# config: {format_config(cfg)}")
    print(f"arch     {spec.arch}")
    print(f"classes  {spec.num_classes}")
    for name, n in info.sections.items():
        print(f"{name:<8} {n:>12,}")
    print(f"{'total':<8} {info.total:>12,}")
    print(f"{'delta':<8} {info.total - base.total:>+12,}  vs {spec.plain_counterpart().arch}")
    return 0


def cmd_gradcheck(args) -> int:
    if not args.arch.startswith("tiny_"):
        raise UsageError(f"gradcheck supports tiny architectures only, got {args.arch}")
    spec = ModelSpec(args.arch, args.classes or SYNTHETIC_CLASSES)
    m = build_model(spec, args.seed)
    ds = synthetic_blobs(spec.num_classes, 2, 8, args.seed)
    x = normalize(ds.images)
    report = check_model_gradients(m, x, ds.labels, eps=args.eps, samples=args.samples, seed=args.seed)
    print(f"# gradcheck arch={spec.arch} seed={args.seed} eps={args.eps} tol={args.tol} "
          f"samples={args.samples} backend={kernels.get_backend()}")
    failed = []
    for name, err in report.items():
        ok = err < args.tol
        if not ok:
            failed.append(name)
        print(f"{name:<40} {err:.3e}  {'ok' if ok else 'FAIL'}")
    if failed:
        print(f"FAIL: {len(failed)} tensor(s) over tolerance: {', '.join(failed)}")
        return 1
    print(f"PASS: max relative error {max(report.values()):.3e}")
    return 0


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        optimizer=cfg["optimizer"],
        base_lr=cfg["lr"],
        momentum=cfg["momentum"],
        weight_decay=cfg["weight_decay"],
        adam_betas=(cfg["adam_beta1"], cfg["adam_beta2"]),
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        lr_step=cfg["lr_step"],
        lr_decay=cfg["lr_decay"],
        seed=cfg["seed"],
    )


def cmd_train(args) -> int:
    cfg = effective_config(args, list(DEFAULTS))
    if not cfg["arch"]:
        raise UsageError("--arch is required")
    train_ds, test_ds = _load_data(cfg)
    spec = _spec(cfg, train_ds.class_count)
    tcfg = _train_config(cfg)
    cfg["classes"] = spec.num_classes
    cfg["lr"] = tcfg.lr
    cfg["cardinality"] = spec.gate_cardinality if spec.gate != "none" else None
    cfg["groups"] = spec.conv_groups
    echo = format_config(cfg)
    print(f"# config: {echo}", flush=True)
    m = build_model(spec, tcfg.seed)

    def show(rec):
        print(f"epoch {rec.epoch:>3}  lr {rec.lr:.6f}  loss {rec.train_loss:.6f}  "
              f"top1 {rec.top1:.2f}  top5 {rec.top5:.2f}", flush=True)

    records = train(m, train_ds, tcfg, on_epoch=show)
    Path(cfg["out"]).write_text(metrics_csv(records, f"config: {echo}"))
    if cfg["checkpoint"]:
        save_model(cfg["checkpoint"], m)
    last = records[-1]
    print(f"train top1={last.top1:.4f} top5={last.top5:.4f}")
    if test_ds is not None:
        t1, t5 = evaluate(m, test_ds)
        print(f"test top1={t1:.4f} top5={t5:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = effective_config(args, ["arch", "classes", "reduction", "cardinality", "groups", "dataset",
                                  "synthetic", "per_class", "image_size", "data_seed", "checkpoint"])
    if not cfg["checkpoint"]:
        raise UsageError("--checkpoint is required")
    if not cfg["arch"]:
        raise UsageError("--arch is required")
    state = load_checkpoint(cfg["checkpoint"])
    train_ds, test_ds = _load_data(cfg)
    ds = test_ds if test_ds is not None and not args.train_split else train_ds
    spec = _spec(cfg, ds.class_count)
    m = build_model(spec)
    m.load_state_dict(state)
    top1, top5 = evaluate(m, ds)
    print(f"top1={top1:.4f} top5={top5:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_model_flags(p, arch_required=False):
    p.add_argument("--arch", choices=ARCHS, required=arch_required)
    p.add_argument("--classes", type=int)
    p.add_argument("--reduction", type=int)
    p.add_argument("--cardinality", type=int)
    p.add_argument("--groups", type=int)


def _add_data_flags(p):
    p.add_argument("--dataset", help="CIFAR-10 binary directory or raw tensor directory")
    p.add_argument("--synthetic", action="store_true", help="use seeded synthetic blobs")
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--image-size", dest="image_size", type=int, help="bilinear resize to N×N")
    p.add_argument("--data-seed", dest="data_seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="saekit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("params", help="print parameter counts")
    _add_model_flags(p, arch_required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcheck", help="finite-difference check of a tiny model")
    p.add_argument("--arch", choices=[a for a in ARCHS if a.startswith("tiny_")], default="tiny_senetv2")
    p.add_argument("--classes", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--samples", type=int, default=4, help="coordinates probed per tensor")
    p.add_argument("--tol", type=float, default=GRADCHECK_TOL)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train and write metrics CSV + checkpoint")
    _add_model_flags(p)
    _add_data_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--optimizer", choices=("sgd_momentum", "adam"))
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--lr-step", dest="lr_step", type=int)
    p.add_argument("--lr-decay", dest="lr_decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--checkpoint")
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1/top-5 of a checkpoint")
    _add_model_flags(p)
    _add_data_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--train-split", action="store_true", help="evaluate the training split")
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SaeKitError, OSError) as exc:
        print(f"saekit: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
