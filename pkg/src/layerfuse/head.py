"""Box geometry, region scoring, the IoU-supervised loss, and the IoU@0.5 metric."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import sigmoid_array


class InvalidBoxError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in normalized image coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(v) and 0.0 <= v <= 1.0 for v in vals):
            raise InvalidBoxError(f"box coordinates must lie in [0, 1]: {vals}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidBoxError(f"degenerate box: {vals}")

    @classmethod
    def from_list(cls, xs: Sequence[float]) -> "Box":
        if len(xs) != 4:
            raise InvalidBoxError(f"box needs 4 coordinates, got {len(xs)}")
        return cls(*(float(x) for x in xs))

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2)

    def geometry(self) -> list[float]:
        """The 7 geometry inputs fed to the region embedding."""
        return [self.x1, self.y1, self.x2, self.y2, self.width, self.height, self.area]


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # written symmetrically so iou(a, b) == iou(b, a) bit for bit
    union = (a.area + b.area) - inter
    return inter / union


@dataclass
class MatchScores:
    logits: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return np.asarray(sigmoid_array(self.logits))


def score_regions(fused: np.ndarray, w_s: np.ndarray, b_s) -> MatchScores:
    fused = np.asarray(fused, dtype=np.float64)
    w_s = np.asarray(w_s, dtype=np.float64).reshape(-1)
    if fused.ndim != 2 or fused.shape[1] != w_s.shape[0]:
        raise ValueError(f"fused {fused.shape} does not match head of size {w_s.shape[0]}")
    return MatchScores(fused @ w_s + float(np.asarray(b_s).reshape(-1)[0]))


def bce_loss(scores: MatchScores, targets: Sequence[float]) -> float:
    """Mean binary cross-entropy between sigmoid(logits) and IoU targets (logit form)."""
    t = np.asarray(targets, dtype=np.float64)
    z = np.asarray(scores.logits, dtype=np.float64)
    if t.shape != z.shape:
        raise ValueError(f"targets {t.shape} vs logits {z.shape}")
    if np.any((t < 0) | (t > 1)) or not np.all(np.isfinite(t)):
        raise ValueError("targets must lie in [0, 1]")
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return float(per.mean())


def predict_region(scores) -> int:
    """Index of the highest score; ties go to the lowest index."""
    probs = scores.logits if isinstance(scores, MatchScores) else np.asarray(scores)
    if probs.size == 0:
        raise ValueError("cannot predict from an empty score vector")
    return int(np.argmax(probs))


def iou05_accuracy(predicted_boxes: Sequence[Box], ground_truth_boxes: Sequence[Box]) -> float:
    """Fraction of predictions whose IoU with the ground truth is strictly above 0.5."""
    if len(predicted_boxes) != len(ground_truth_boxes):
        raise ValueError(f"{len(predicted_boxes)} predictions vs {len(ground_truth_boxes)} ground truths")
    if not predicted_boxes:
        warnings.warn("iou05_accuracy on an empty set; returning 0.0")
        return 0.0
    hits = sum(iou(p, g) > 0.5 for p, g in zip(predicted_boxes, ground_truth_boxes))
    return hits / len(predicted_boxes)
