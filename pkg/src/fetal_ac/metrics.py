"""Dice overlap, binary confusion matrices and AC evaluation summaries."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .ellipse import Ellipse, ellipse_mask
from .errors import DimensionError, ParameterError


def dice(gt: np.ndarray, pred: np.ndarray) -> float:
    """2|A & B| / (|A| + |B|); two empty masks score 1.0."""
    gt = np.asarray(gt, bool)
    pred = np.asarray(pred, bool)
    if gt.shape != pred.shape:
        raise DimensionError(f"mask shapes differ: {gt.shape} vs {pred.shape}")
    total = int(gt.sum()) + int(pred.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(gt & pred)) / total


@dataclass(frozen=True)
class ConfusionMatrix2:
    n_tp: int
    n_tn: int
    n_fp: int
    n_fn: int

    def __post_init__(self):
        if min(self.n_tp, self.n_tn, self.n_fp, self.n_fn) < 0:
            raise ParameterError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.n_tp + self.n_tn + self.n_fp + self.n_fn

    @classmethod
    def from_predictions(cls, truth, predicted) -> "ConfusionMatrix2":
        t = np.asarray(truth, bool)
        p = np.asarray(predicted, bool)
        if t.shape != p.shape:
            raise DimensionError("truth and prediction lengths differ")
        return cls(int(np.sum(t & p)), int(np.sum(~t & ~p)), int(np.sum(~t & p)), int(np.sum(t & ~p)))


def accuracy(cm: ConfusionMatrix2) -> float:
    if cm.total == 0:
        raise ParameterError("empty confusion matrix")
    return (cm.n_tp + cm.n_tn) / cm.total


@dataclass
class ACEvaluation:
    ids: list[str]
    dice: list[float | None]
    top_fraction: float = 0.8
    extra: dict = field(default_factory=dict)

    @property
    def successes(self) -> np.ndarray:
        return np.array([d for d in self.dice if d is not None], np.float64)

    @property
    def failure_rate(self) -> float:
        return 1.0 - len(self.successes) / len(self.dice) if self.dice else 0.0

    @property
    def mean(self) -> float:
        s = self.successes
        return float(s.mean()) if s.size else float("nan")

    @property
    def std(self) -> float:
        s = self.successes
        return float(s.std()) if s.size else float("nan")

    def top(self) -> np.ndarray:
        s = np.sort(self.successes)[::-1]
        return s[: int(round(self.top_fraction * s.size))]

    @property
    def top_mean(self) -> float:
        t = self.top()
        return float(t.mean()) if t.size else float("nan")

    @property
    def top_std(self) -> float:
        t = self.top()
        return float(t.std()) if t.size else float("nan")

    def summary(self) -> dict:
        return {
            "n": len(self.dice),
            "failures": len(self.dice) - len(self.successes),
            "failure_rate": self.failure_rate,
            "dice_mean": self.mean,
            "dice_std": self.std,
            "top_fraction": self.top_fraction,
            "top_dice_mean": self.top_mean,
            "top_dice_std": self.top_std,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["id", "dice", "status"])
            for i, d in zip(self.ids, self.dice):
                w.writerow([i, "" if d is None else f"{d:.6f}", "failed" if d is None else "ok"])


def evaluate_ac(truth: list[Ellipse], measured: list[Ellipse | None], shapes, ids=None,
                top_fraction: float = 0.8) -> ACEvaluation:
    """Rasterize truth and measured ellipses and score each image by Dice.

    ``measured`` entries of ``None`` are failures: they count toward the
    failure rate but are left out of the mean and the top-fraction summary.
    """
    if len(truth) != len(measured):
        raise DimensionError("truth and measurement lists differ in length")
    if isinstance(shapes, tuple) and len(shapes) == 2 and all(isinstance(v, (int, np.integer)) for v in shapes):
        shapes = [shapes] * len(truth)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(truth))]
    scores = []
    for t, m, shape in zip(truth, measured, shapes):
        if m is None:
            scores.append(None)
        else:
            scores.append(dice(ellipse_mask(t, shape), ellipse_mask(m, shape)))
    return ACEvaluation(ids, scores, top_fraction)
