"""Optimization, learning-rate scheduling, the training loop and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import DataError
from .losses import LossWeights, hybrid_loss
from .metrics import (
    METRIC_NAMES,
    BoxplotStats,
    CategoryTable,
    MetricsReport,
    aggregate_by_category,
    boxplot_stats,
    confusion_counts,
    metrics,
)
from .network import Network, SwitchConfig, build_network, save_weights
from .patches import (
    OVERLAP,
    PATCH,
    DatasetManifest,
    ManifestRecord,
    extract_patches,
    normalize,
    one_hot,
    plan_patches,
    read_gray,
    read_mask,
    stitch,
)
from .tensor import Parameter, Tape, Tensor, backward

log = logging.getLogger(__name__)

LOG_HEADER = "epoch,train_loss,val_loss,val_dice,lr"


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], state: AdamState) -> None:
    """Bias-corrected Adam update of every parameter from its accumulated grad."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p in params:
        key = p.name or id(p)
        if key not in state.m:
            state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        m, v = state.m[key], state.v[key]
        g = p.grad
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype)


@dataclass
class PlateauState:
    lr: float = 1e-3
    factor: float = 0.1
    patience: int = 5
    min_lr: float = 1e-6
    min_delta: float = 1e-8
    best: float = math.inf
    wait: int = 0


def plateau_update(state: PlateauState, val_loss: float) -> float:
    """Cut the learning rate by ``factor`` once the monitored loss has failed
    to improve for more than ``patience`` consecutive epochs."""
    if val_loss <= state.best - state.min_delta:
        state.best = val_loss
        state.wait = 0
    else:
        state.wait += 1
        if state.wait > state.patience:
            state.lr = max(state.lr * state.factor, state.min_lr)
            state.wait = 0
    return state.lr


@dataclass
class TrainRun:
    epochs: int = 25
    batch_size: int = 2
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-3
    factor: float = 0.1
    patience: int = 5
    min_lr: float = 1e-6
    patch: int = PATCH
    overlap: int = OVERLAP
    out_dir: Optional[Path] = None


@dataclass
class LogRow:
    epoch: int
    train_loss: float
    val_loss: float
    val_dice: float
    lr: float

    def csv(self) -> str:
        return f"{self.epoch},{self.train_loss!r},{self.val_loss!r},{self.val_dice!r},{self.lr!r}"


def format_log(rows: Sequence[LogRow]) -> str:
    return "\n".join([LOG_HEADER] + [r.csv() for r in rows]) + "\n"


def _load_pair(rec: ManifestRecord) -> tuple[np.ndarray, np.ndarray]:
    try:
        image = read_gray(rec.image)
        mask = read_mask(rec.mask)
    except FileNotFoundError as exc:
        raise DataError(f"{exc}") from None
    except OSError as exc:
        raise DataError(f"cannot decode {rec.image} / {rec.mask}: {exc}") from None
    if image.shape != mask.shape:
        raise DataError(f"{rec.image}: image {image.shape} and mask {mask.shape} differ in size")
    return image, mask


def _training_patches(records, cfg: SwitchConfig, run: TrainRun, dtype):
    xs, ys = [], []
    for rec in records:
        image, mask = _load_pair(rec)
        h, w = image.shape
        grid = plan_patches(w, h, run.patch, run.overlap)
        xs += extract_patches(normalize(image, dtype), grid)
        ys += extract_patches(one_hot(mask, cfg.num_classes, dtype), grid)
    return np.concatenate([t.data for t in xs]), np.concatenate([t.data for t in ys])


def train(
    cfg: SwitchConfig,
    data: DatasetManifest,
    run: TrainRun,
    dtype=np.float32,
    net: Optional[Network] = None,
) -> tuple[Network, list[LogRow]]:
    """Fit a network on the manifest's train split, validating after every epoch.

    When ``run.out_dir`` is set, ``train_log.csv``, ``last.ckpt`` and
    ``best.ckpt`` (highest validation dice) are written there each epoch.
    """
    train_recs, val_recs = data.split("train"), data.split("val")
    if not train_recs or not val_recs:
        raise DataError("manifest needs non-empty train and val splits")
    net = net or build_network(cfg, seed=run.seed, dtype=dtype)
    x_all, y_all = _training_patches(train_recs, cfg, run, net.dtype)
    val_pairs = [_load_pair(r) for r in val_recs]
    rng = np.random.default_rng([run.seed, 1])
    params = net.parameters()
    adam = AdamState(lr=run.lr)
    plateau = PlateauState(lr=run.lr, factor=run.factor, patience=run.patience, min_lr=run.min_lr)
    out_dir = Path(run.out_dir) if run.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[LogRow] = []
    best_dice = -math.inf
    for epoch in range(1, run.epochs + 1):
        order = rng.permutation(len(x_all))
        losses = []
        for start in range(0, len(order), run.batch_size):
            idx = order[start : start + run.batch_size]
            xb, yb = Tensor(x_all[idx]), Tensor(y_all[idx])
            net.zero_grad()
            with Tape() as tape:
                loss = hybrid_loss(net(xb, "train"), yb, run.loss_weights)
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite training loss {value} at epoch {epoch}, step {adam.step + 1}")
            backward(tape, loss)
            adam_step(params, adam)
            losses.append(value)
        val_loss, val_dice = _validate(net, val_pairs, cfg, run)
        row = LogRow(epoch, float(np.mean(losses)), val_loss, val_dice, adam.lr)
        rows.append(row)
        log.info("epoch %d train %.5f val %.5f dice %.4f lr %g", *row.__dict__.values())
        adam.lr = plateau_update(plateau, val_loss)
        if out_dir:
            (out_dir / "train_log.csv").write_text(format_log(rows))
            save_weights(net, out_dir / "last.ckpt")
            if val_dice > best_dice:
                save_weights(net, out_dir / "best.ckpt")
        best_dice = max(best_dice, val_dice)
    net.zero_grad()
    return net, rows


def _validate(net: Network, pairs, cfg: SwitchConfig, run: TrainRun) -> tuple[float, float]:
    losses, dices = [], []
    for image, mask in pairs:
        probs = predict_probs(net, image, run.patch, run.overlap)
        target = one_hot(mask, cfg.num_classes, net.dtype)
        losses.append(hybrid_loss(probs, target, run.loss_weights).item())
        pred = probs.data[0].argmax(axis=0)
        dices.append(metrics(confusion_counts(pred > 0, mask > 0)).dice)
    return float(np.mean(losses)), float(np.mean(dices))


def predict_probs(
    net: Network, image: np.ndarray, patch: int = PATCH, overlap: int = OVERLAP, batch_size: int = 2
) -> Tensor:
    """Class probabilities for a full uint8 image via overlapped patch inference."""
    h, w = image.shape
    grid = plan_patches(w, h, patch, overlap)
    patches = extract_patches(normalize(image, net.dtype), grid)
    outputs = []
    for start in range(0, len(patches), batch_size):
        chunk = patches[start : start + batch_size]
        probs = net(Tensor(np.concatenate([p.data for p in chunk])), "infer")
        outputs += [Tensor(probs.data[i : i + 1]) for i in range(len(chunk))]
    return stitch(outputs, grid)


def predict_mask(net: Network, image: np.ndarray, patch: int = PATCH, overlap: int = OVERLAP) -> np.ndarray:
    """Binary foreground mask (class 1 wins the per-pixel argmax)."""
    probs = predict_probs(net, image, patch, overlap)
    return (probs.data[0].argmax(axis=0) == 1).astype(np.uint8)


@dataclass
class ImageResult:
    path: Path
    category: int
    report: MetricsReport


@dataclass
class Evaluation:
    rows: list[ImageResult]
    table: CategoryTable
    boxplots: dict[str, BoxplotStats]


Predictor = Callable[[np.ndarray, ManifestRecord], np.ndarray]


def evaluate(
    model: Union[Network, Predictor],
    data: DatasetManifest,
    split: str = "test",
    patch: int = PATCH,
    overlap: int = OVERLAP,
) -> Evaluation:
    """Per-image metrics, the per-category table and per-metric boxplot summaries.

    ``model`` is a network or any callable mapping ``(image, record)`` to a
    binary mask, which lets fixed predictions be scored through the same path.
    """
    recs = data.split(split)
    if not recs:
        raise DataError(f"split {split!r} is empty")
    if isinstance(model, Network):
        net = model

        def predictor(image, _rec):
            return predict_mask(net, image, patch, overlap)
    else:
        predictor = model
    rows = []
    for rec in recs:
        image, mask = _load_pair(rec)
        pred = np.asarray(predictor(image, rec))
        rows.append(ImageResult(rec.image, rec.category, metrics(confusion_counts(pred > 0, mask > 0))))
    table = aggregate_by_category((r.report, r.category) for r in rows)
    boxplots = {m: boxplot_stats([getattr(r.report, m) for r in rows]) for m in METRIC_NAMES}
    return Evaluation(rows, table, boxplots)
