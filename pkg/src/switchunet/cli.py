"""Command line entry point: ``switchunet {train,predict,evaluate,params,features}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import CheckpointError, ConfigurationError, DataError, ShapeError
from .losses import LossWeights
from .metrics import METRIC_NAMES
from .network import (
    MODEL_NAMES,
    Network,
    SwitchConfig,
    build_network,
    format_summary,
    load_weights,
    named_config,
    summary,
)
from .patches import OVERLAP, PATCH, load_manifest, read_gray, write_gray, write_mask
from .tensor import Tensor
from .trainer import TrainRun, evaluate, predict_mask, train

log = logging.getLogger("switchunet")

_ERRORS = (ConfigurationError, CheckpointError, DataError, ShapeError, ValueError, OSError, ArithmeticError)


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    model: Optional[str] = None
    switches: Optional[dict] = None
    manifest: Optional[str] = None
    out: Optional[str] = None
    seed: int = 0
    loss_weights: dict = field(default_factory=lambda: {"lambda1": 1.0, "lambda2": 0.5})
    trainer: dict = field(default_factory=dict)
    patch: dict = field(default_factory=lambda: {"size": PATCH, "overlap": OVERLAP})

    def switch_config(self) -> SwitchConfig:
        if (self.model is None) == (self.switches is None):
            raise ConfigurationError("give exactly one of a model name or explicit switches")
        if self.model is not None:
            return named_config(self.model)
        return SwitchConfig.from_dict(self.switches)

    def train_run(self) -> TrainRun:
        allowed = {"epochs", "batch_size", "lr", "factor", "patience", "min_lr"}
        unknown = set(self.trainer) - allowed
        if unknown:
            raise ConfigurationError(f"unknown trainer settings: {sorted(unknown)}")
        return TrainRun(
            seed=self.seed,
            loss_weights=LossWeights(**self.loss_weights),
            patch=int(self.patch.get("size", PATCH)),
            overlap=int(self.patch.get("overlap", OVERLAP)),
            **self.trainer,
        )

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "switches": self.switches,
            "manifest": self.manifest,
            "out": self.out,
            "seed": self.seed,
            "loss_weights": self.loss_weights,
            "trainer": self.trainer,
            "patch": self.patch,
        }


def _load_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config not found: {path}")
        raw = json.loads(path.read_text())
        unknown = set(raw) - set(RunConfig.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"{path}: unknown keys {sorted(unknown)}")
        cfg = RunConfig(**raw)
    if getattr(args, "model", None):
        cfg.model, cfg.switches = args.model, None
    for key in ("manifest", "out", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    for key in ("epochs", "batch_size", "lr"):
        value = getattr(args, key, None)
        if value is not None:
            cfg.trainer = {**cfg.trainer, key: value}
    if getattr(args, "patch", None) is not None:
        cfg.patch = {**cfg.patch, "size": args.patch}
    if getattr(args, "overlap", None) is not None:
        cfg.patch = {**cfg.patch, "overlap": args.overlap}
    for key in ("lambda1", "lambda2"):
        value = getattr(args, key, None)
        if value is not None:
            cfg.loss_weights = {**cfg.loss_weights, key: value}
    return cfg


def _require(value, flag: str):
    if value is None:
        raise UsageError(f"{flag} is required")
    return value


def _load_network(cfg: RunConfig, checkpoint) -> Network:
    net = build_network(cfg.switch_config(), seed=cfg.seed)
    load_weights(net, _require(checkpoint, "--checkpoint"))
    return net


def cmd_train(args) -> int:
    cfg = _load_config(args)
    switches = cfg.switch_config()
    run = cfg.train_run()
    manifest = load_manifest(_require(cfg.manifest, "--manifest"))
    out = Path(_require(cfg.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    resolved = cfg.to_dict() | {"model": None, "switches": switches.to_dict()}
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    run.out_dir = out
    _, rows = train(switches, manifest, run)
    print(f"trained {len(rows)} epochs; log, checkpoints and config in {out}")
    return 0


def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"})
        if not files:
            raise DataError(f"no images in {path}")
        return files
    if not path.exists():
        raise FileNotFoundError(f"input not found: {path}")
    return [path]


def cmd_predict(args) -> int:
    cfg = _load_config(args)
    inputs = _inputs(Path(args.input))
    out = Path(_require(cfg.out, "--out"))
    net = _load_network(cfg, args.checkpoint)
    patch, overlap = int(cfg.patch.get("size", PATCH)), int(cfg.patch.get("overlap", OVERLAP))
    out.mkdir(parents=True, exist_ok=True)
    for path in inputs:
        mask = predict_mask(net, read_gray(path), patch, overlap)
        write_mask(out / f"{path.stem}.png", mask)
    print(f"wrote {len(inputs)} mask(s) to {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    manifest = load_manifest(_require(cfg.manifest, "--manifest"))
    split = args.split
    if not manifest.split(split):
        raise DataError(f"split {split!r} is empty in {cfg.manifest}")
    out = Path(_require(cfg.out, "--out"))
    net = _load_network(cfg, args.checkpoint)
    patch, overlap = int(cfg.patch.get("size", PATCH)), int(cfg.patch.get("overlap", OVERLAP))
    result = evaluate(net, manifest, split, patch, overlap)
    out.mkdir(parents=True, exist_ok=True)
    write_evaluation(result, out)
    overall = result.table.overall
    print(" ".join(f"{m}={getattr(overall, m):.4f}" for m in METRIC_NAMES))
    return 0


def write_evaluation(result, out: Path) -> None:
    """Per-image CSV, category table CSV, JSON summary and boxplot statistics."""
    with open(out / "per_image.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "category", *METRIC_NAMES])
        for r in result.rows:
            w.writerow([str(r.path), r.category, *(repr(v) for v in r.report.as_tuple())])
    cats = sorted(result.table.per_category)
    with open(out / "category_table.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", *cats])
        w.writerow(["images", *(result.table.counts[c] for c in cats)])
        for m in METRIC_NAMES:
            w.writerow([m, *(repr(getattr(result.table.per_category[c], m)) for c in cats)])
    summary_doc = {
        "overall": result.table.overall.to_dict(),
        "categories": {str(c): result.table.per_category[c].to_dict() for c in cats},
        "counts": {str(c): result.table.counts[c] for c in cats},
        "images": len(result.rows),
    }
    (out / "summary.json").write_text(json.dumps(summary_doc, indent=2) + "\n")
    boxes = {m: b.to_dict() for m, b in result.boxplots.items()}
    (out / "boxplots.json").write_text(json.dumps(boxes, indent=2) + "\n")


def cmd_params(args) -> int:
    cfg = _load_config(args)
    net = build_network(cfg.switch_config(), seed=cfg.seed)
    rows = summary(net, args.height, args.width)
    print(format_summary(rows))
    return 0


def _resize_nearest(img: np.ndarray, h: int, w: int) -> np.ndarray:
    rows = np.arange(h) * img.shape[0] // h
    cols = np.arange(w) * img.shape[1] // w
    return img[rows][:, cols]


def to_gray8(img: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant map becomes all zeros."""
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.rint((img - lo) / (hi - lo) * 255).astype(np.uint8)


def decoder_feature_images(net: Network, image: np.ndarray) -> dict[str, np.ndarray]:
    """Channel-mean decoder feature maps, resized to the image and scaled to 8 bits."""
    h, w = image.shape
    k = 2 ** (net.cfg.depth - 1)
    ph, pw = -(-h // k) * k, -(-w // k) * k
    padded = np.zeros((ph, pw), dtype=net.dtype)
    padded[:h, :w] = image.astype(net.dtype) / 255
    feats: dict = {}
    net.forward(Tensor(padded[None, None]), "infer", features=feats)
    out = {}
    for name, t in feats.items():
        fmap = t.data[0].mean(axis=0)
        scale = ph // fmap.shape[0]
        fmap = fmap[: -(-h // scale), : -(-w // scale)]
        out[name] = to_gray8(_resize_nearest(fmap, h, w))
    return out


def cmd_features(args) -> int:
    cfg = _load_config(args)
    image_path = Path(args.image)
    if not image_path.exists():
        raise FileNotFoundError(f"image not found: {image_path}")
    out = Path(_require(cfg.out, "--out"))
    net = _load_network(cfg, args.checkpoint)
    images = decoder_feature_images(net, read_gray(image_path))
    out.mkdir(parents=True, exist_ok=True)
    for name, pixels in images.items():
        write_gray(out / f"{name}.png", pixels)
    print(f"wrote {len(images)} decoder feature map(s) to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="switchunet", description=__doc__, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, manifest=False, split=False):
        p.add_argument("--config", default=None, help="JSON run configuration")
        p.add_argument("--model", default=None, choices=MODEL_NAMES, help="named model preset")
        p.add_argument("--seed", type=int, default=None, help="random seed (config value, else 0)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--patch", type=int, default=None, help=f"patch size (config value, else {PATCH})")
        p.add_argument("--overlap", type=int, default=None, help=f"patch overlap (config value, else {OVERLAP})")
        if checkpoint:
            p.add_argument("--checkpoint", default=None, help="weights file")
        if manifest:
            p.add_argument("--manifest", default=None, help="dataset manifest CSV")
        if split:
            p.add_argument("--split", default="test", choices=("train", "val", "test"), help="split to score")

    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    common(p, manifest=True)
    p.add_argument("--epochs", type=int, default=None, help="epochs (config value, else 25)")
    p.add_argument("--batch-size", type=int, default=None, help="batch size (config value, else 2)")
    p.add_argument("--lr", type=float, default=None, help="initial learning rate (config value, else 0.001)")
    p.add_argument("--lambda1", type=float, default=None, help="cross-entropy weight (config value, else 1)")
    p.add_argument("--lambda2", type=float, default=None, help="dice weight (config value, else 0.5)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write binary masks for images", formatter_class=fmt)
    common(p, checkpoint=True)
    p.add_argument("input", help="image file or directory of images")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score a checkpoint on a manifest split", formatter_class=fmt)
    common(p, checkpoint=True, manifest=True, split=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("params", help="per-layer parameter report", formatter_class=fmt)
    common(p)
    p.add_argument("--height", type=int, default=PATCH, help="input height for shape report")
    p.add_argument("--width", type=int, default=PATCH, help="input width for shape report")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("features", help="export decoder feature maps as PNG", formatter_class=fmt)
    common(p, checkpoint=True)
    p.add_argument("image", help="input image")
    p.set_defaults(func=cmd_features)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"switchunet {args.command}: {exc}", file=sys.stderr)
        return 2
    except _ERRORS as exc:
        print(f"switchunet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
