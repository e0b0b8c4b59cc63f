"""Binary mask metrics, per-category aggregation and boxplot statistics."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError

METRIC_NAMES = ("accuracy", "specificity", "precision", "recall", "dice")
CATEGORIES = tuple(range(1, 11))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    specificity: float
    precision: float
    recall: float
    dice: float

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, k) for k in METRIC_NAMES)

    def to_dict(self) -> dict:
        return asdict(self)


def confusion_counts(pred, gt) -> ConfusionCounts:
    """Pixel tallies with foreground (1) as the positive class."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, tn, fn)


def _ratio(num: int, den: int) -> float:
    # 0/0 means nothing to get wrong (e.g. empty prediction vs empty truth)
    return 1.0 if den == 0 else num / den


def metrics(c: ConfusionCounts) -> MetricsReport:
    if c.total <= 0:
        raise ValueError("confusion counts are empty")
    return MetricsReport(
        accuracy=_ratio(c.tp + c.tn, c.total),
        specificity=_ratio(c.tn, c.fp + c.tn),
        precision=_ratio(c.tp, c.tp + c.fp),
        recall=_ratio(c.tp, c.tp + c.fn),
        dice=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
    )


def mean_report(reports: Sequence[MetricsReport]) -> MetricsReport:
    if not reports:
        raise ValueError("cannot average an empty list of reports")
    k = len(reports)
    return MetricsReport(*(sum(getattr(r, m) for r in reports) / k for m in METRIC_NAMES))


@dataclass
class CategoryTable:
    per_category: dict[int, MetricsReport]
    counts: dict[int, int]
    overall: MetricsReport


def aggregate_by_category(per_image: Iterable[tuple[MetricsReport, int]]) -> CategoryTable:
    """Unweighted per-category means plus the mean over all images."""
    groups: dict[int, list[MetricsReport]] = defaultdict(list)
    everything = []
    for report, cat in per_image:
        if cat not in CATEGORIES:
            raise ValueError(f"category must be in 1..10, got {cat!r}")
        groups[cat].append(report)
        everything.append(report)
    if not everything:
        raise ValueError("no images to aggregate")
    cats = sorted(groups)
    return CategoryTable(
        per_category={c: mean_report(groups[c]) for c in cats},
        counts={c: len(groups[c]) for c in cats},
        overall=mean_report(everything),
    )


@dataclass
class BoxplotStats:
    min: float
    q1: float
    median: float
    q3: float
    max: float
    mean: float
    lower_whisker: float
    upper_whisker: float
    outliers: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def boxplot_stats(values: Sequence[float]) -> BoxplotStats:
    """Tukey boxplot summary with linearly interpolated quartiles.

    Whiskers reach the most extreme observations inside
    ``[q1 - 1.5 IQR, q3 + 1.5 IQR]``; anything beyond them is an outlier.
    """
    data = np.sort(np.asarray(values, dtype=np.float64))
    if data.size == 0:
        raise ValueError("boxplot statistics need at least one value")
    q1, median, q3 = np.quantile(data, [0.25, 0.5, 0.75], method="linear")
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = data[(data >= lo_fence) & (data <= hi_fence)]
    outliers = data[(data < lo_fence) | (data > hi_fence)]
    return BoxplotStats(
        min=float(data[0]),
        q1=float(q1),
        median=float(median),
        q3=float(q3),
        max=float(data[-1]),
        # offset from the median keeps the mean exact for constant data
        mean=float(median + (data - median).mean()),
        lower_whisker=float(inside[0]),
        upper_whisker=float(inside[-1]),
        outliers=[float(v) for v in outliers],
    )
