"""Binary-segmentation evaluation: per-class F1, IoU, mIoU, pixel accuracy.

Metrics are pooled dataset-wide by default (confusion counts merged over
tiles); a per-tile-mean alternative is available where noted. When a class
is absent from both prediction and truth its IoU and F1 are 1 by convention
(vacuous agreement); predicted-but-absent scores 0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise MetricsError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


def confusion(pred: np.ndarray, truth: np.ndarray, positive_class: int = 1) -> ConfusionCounts:
    """Exact pixel counts for one class treated as positive."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise MetricsError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    p = pred == positive_class
    t = truth == positive_class
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & t)),
        fp=int(np.count_nonzero(p & ~t)),
        fn=int(np.count_nonzero(~p & t)),
        tn=int(np.count_nonzero(~p & ~t)),
    )


def f1(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0  # class absent everywhere
    return 2.0 * c.tp / denom


def iou(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return c.tp / denom


def pixel_accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        return 1.0
    return (c.tp + c.tn) / c.total


def recall(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        return 1.0
    return c.tp / (c.tp + c.fn)


def miou(per_class: dict[int, ConfusionCounts]) -> float:
    if not per_class:
        raise MetricsError("no classes given")
    return sum(iou(c) for c in per_class.values()) / len(per_class)


def evaluate_masks(
    preds: list[np.ndarray],
    truths: list[np.ndarray],
    classes: tuple[int, ...] = (0, 1),
    per_tile_mean: bool = False,
) -> dict[int, ConfusionCounts] | dict[str, float]:
    """Dataset evaluation over parallel lists of masks.

    Pooled mode (default) returns merged per-class ConfusionCounts; per-tile
    mode returns mean-per-tile f1/iou per class keyed "f1_<c>" / "iou_<c>".
    """
    if len(preds) != len(truths) or not preds:
        raise MetricsError("need equal, non-empty pred/truth lists")
    if per_tile_mean:
        sums = {f"{name}_{c}": 0.0 for c in classes for name in ("f1", "iou")}
        for p, t in zip(preds, truths):
            for c in classes:
                counts = confusion(p, t, c)
                sums[f"f1_{c}"] += f1(counts)
                sums[f"iou_{c}"] += iou(counts)
        return {k: v / len(preds) for k, v in sums.items()}
    pooled = {c: ConfusionCounts(0, 0, 0, 0) for c in classes}
    for p, t in zip(preds, truths):
        for c in classes:
            pooled[c] = pooled[c].merge(confusion(p, t, c))
    return pooled


def write_report_csv(per_class: dict[int, ConfusionCounts], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "f1", "iou", "pixel_accuracy", "tp", "fp", "fn", "tn"])
        for cls in sorted(per_class):
            c = per_class[cls]
            w.writerow(
                [cls, f"{f1(c):.6f}", f"{iou(c):.6f}", f"{pixel_accuracy(c):.6f}", c.tp, c.fp, c.fn, c.tn]
            )
