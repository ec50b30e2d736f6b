"""Pixel-wise detection metrics: ROC/AUC over pooled in-mask pixels and the maximal Dice sweep."""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import auc as area_under_curve
from sklearn.metrics import roc_curve

from .data import GroundTruth
from .errors import EmptyDatasetError, UndefinedAUCError, ValidationError

log = logging.getLogger("anomaly_bench.evaluation")


@dataclass(eq=False)
class DifferenceMap:
    scores: np.ndarray
    mask: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.scores.shape != self.mask.shape:
            raise ValidationError(f"Scores {self.scores.shape} and mask {self.mask.shape} differ in shape")
        if not np.isfinite(self.scores).all():
            raise ValidationError(f"Difference map from {self.source or 'unknown'} has non-finite scores")
        if (self.scores < 0).any():
            raise ValidationError(f"Difference map from {self.source or 'unknown'} has negative scores")

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape


@dataclass(eq=False)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


@dataclass(frozen=True)
class GridSpec:
    start: float
    stop: float
    points: int

    def thresholds(self) -> np.ndarray:
        if self.points < 2:
            return np.array([self.start], dtype=np.float64)
        # i / (n - 1) keeps every point of a coarse grid inside a refined one
        fractions = np.arange(self.points, dtype=np.float64) / (self.points - 1)
        return self.start + (self.stop - self.start) * fractions

    def refined(self) -> "GridSpec":
        return GridSpec(self.start, self.stop, 2 * self.points - 1)


DIFFERENCE_GRID = GridSpec(0.0, 6.0, 1001)
PROBABILITY_GRID = GridSpec(0.0, 1.0, 401)


@dataclass(eq=False)
class SweepResult:
    thresholds: np.ndarray
    dice_per_threshold: np.ndarray
    best_threshold: float
    mdsc: float


def _check_pool(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise ValidationError(f"{scores.size} scores against {labels.size} labels")
    return scores, labels


def roc(scores, labels) -> RocCurve:
    """ROC over every distinct score; equal scores flip together."""
    scores, labels = _check_pool(scores, labels)
    positives = int(labels.sum())
    negatives = labels.size - positives
    if positives == 0 or negatives == 0:
        raise UndefinedAUCError(f"ROC needs both classes, got {positives} positives and {negatives} negatives")

    fpr, tpr, thresholds = roc_curve(labels, scores, drop_intermediate=False)
    # older scikit-learn puts max + 1 in front instead of inf
    thresholds = np.r_[np.inf, thresholds[1:]]
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds)


def auc(curve: RocCurve) -> float:
    return float(area_under_curve(curve.fpr, curve.tpr))


def roc_auc(scores, labels) -> float:
    return auc(roc(scores, labels))


def dice(pred, gt, mask=None) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValidationError(f"Prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        pred = pred & mask
        gt = gt & mask
    denominator = int(pred.sum()) + int(gt.sum())
    if denominator == 0:
        return 1.0
    return 2 * int((pred & gt).sum()) / denominator


def max_dice_sweep(scores, labels, grid: GridSpec = DIFFERENCE_GRID) -> SweepResult:
    """Dice of ``scores > t`` for every grid threshold over pooled pixels.

    Counts come from one sort plus binary search, so each value equals a direct
    ``dice(scores > t, labels)`` evaluation exactly.
    """
    scores, labels = _check_pool(scores, labels)
    thresholds = grid.thresholds()
    order = np.argsort(scores, kind="mergesort")
    ranked = scores[order]
    # positives among the k largest scores
    positives_from_top = np.r_[0, np.cumsum(labels[order][::-1])]
    total_positive = int(labels.sum())

    predicted = ranked.size - np.searchsorted(ranked, thresholds, side="right")
    overlap = positives_from_top[predicted]
    denominator = predicted + total_positive
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(denominator == 0, 1.0, 2 * overlap / np.maximum(denominator, 1))
    best = int(np.argmax(values))
    return SweepResult(
        thresholds=thresholds,
        dice_per_threshold=values,
        best_threshold=float(thresholds[best]),
        mdsc=float(values[best]),
    )


def pool(pairs: Iterable[tuple[DifferenceMap, GroundTruth]]) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate in-mask scores and labels in the given order."""
    scores, labels = [], []
    for difference, truth in pairs:
        if difference.shape != truth.shape:
            raise ValidationError(f"Map {difference.shape} and ground truth {truth.shape} differ in shape")
        scores.append(difference.scores[difference.mask])
        labels.append(truth.labels[difference.mask])
    if not scores or sum(s.size for s in scores) == 0:
        raise EmptyDatasetError("Nothing to pool: no in-mask pixels")
    return np.concatenate(scores), np.concatenate(labels)


@dataclass(frozen=True)
class MetricRow:
    detector: str
    dataset: str
    auc: Optional[float]
    mdsc: float
    threshold: float
    checkpoint: str = ""
    config_hash: str = ""


METRIC_COLUMNS = ["detector", "dataset", "auc", "mdsc", "threshold", "checkpoint", "config_hash"]


def metrics_frame(rows: Sequence[MetricRow]) -> pd.DataFrame:
    return pd.DataFrame([r.__dict__ for r in rows], columns=METRIC_COLUMNS)


def write_metrics(rows: Sequence[MetricRow], directory, extra: Optional[dict] = None) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frame = metrics_frame(rows)
    csv_path = directory / "metrics.csv"
    frame.to_csv(csv_path, index=False, float_format="%.10f")
    json_path = directory / "metrics.json"
    payload = {"metrics": [r.__dict__ for r in rows]}
    payload.update(extra or {})
    json_path.write_text(json.dumps(payload, indent=2, default=str))
    return csv_path, json_path


def write_roc(curve: RocCurve, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"threshold": curve.thresholds, "fpr": curve.fpr, "tpr": curve.tpr}).to_csv(
        path, index=False, float_format="%.10f"
    )
    return path


def read_roc(path) -> RocCurve:
    frame = pd.read_csv(path)
    return RocCurve(
        fpr=frame["fpr"].to_numpy(dtype=np.float64),
        tpr=frame["tpr"].to_numpy(dtype=np.float64),
        thresholds=frame["threshold"].to_numpy(dtype=np.float64),
    )
