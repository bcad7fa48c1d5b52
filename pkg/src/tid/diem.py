"""Dual-task importance evaluation.

Turns a model's regression and classification outputs into a per-point
task-importance score: a three-level localization score keyed to the
detector's positive/negative IoU thresholds, a two-level classification
score keyed to a top-fraction rule, and their elementwise product. The
same procedure applies to teacher and student outputs alike.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._util import ceil_fraction, top_k_flat_indices
from .errors import ConfigError, ShapeMismatchError
from .geometry import NO_ASSIGNMENT, GroundTruth, max_iou_with_assignment
from .tensorio import LevelBundle


@dataclass(frozen=True)
class DiemConfig:
    """Knobs for the importance scores.

    ``thrd_pos``/``thrd_neg`` mirror the detector's positive/negative
    sample thresholds; ``cls_top_fraction`` is the share of points that
    count as classification hits.
    """

    thrd_pos: float = 0.5
    thrd_neg: float = 0.4
    cls_top_fraction: float = 0.025
    score_pos: float = 2.0
    score_mid: float = 1.5
    score_neg: float = 0.4
    cls_hit: float = 1.5
    cls_miss: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.thrd_neg < self.thrd_pos <= 1.0:
            raise ConfigError(
                f"need 0 <= thrd_neg < thrd_pos <= 1, got "
                f"thrd_neg={self.thrd_neg}, thrd_pos={self.thrd_pos}"
            )
        if not 0.0 < self.cls_top_fraction <= 1.0:
            raise ConfigError(
                f"cls_top_fraction must be in (0, 1], got {self.cls_top_fraction}"
            )


@dataclass(frozen=True)
class ScoreMaps:
    """Per-point regression score, classification score, and their product."""

    score_r: np.ndarray
    score_c: np.ndarray
    score: np.ndarray


def regression_score(iou_max: np.ndarray, cfg: DiemConfig) -> np.ndarray:
    """Three-level localization score from the per-point best IoU.

    >= thrd_pos scores ``score_pos``, <= thrd_neg scores ``score_neg``,
    strictly between scores ``score_mid``. Both boundaries are inclusive
    toward the outer levels.
    """
    iou = np.asarray(iou_max, dtype=np.float64)
    if iou.size and (iou.min() < 0.0 or iou.max() > 1.0):
        raise ValueError("iou_max entries must lie in [0, 1]")
    return np.where(
        iou >= cfg.thrd_pos,
        cfg.score_pos,
        np.where(iou > cfg.thrd_neg, cfg.score_mid, cfg.score_neg),
    )


def classification_score(
    class_scores: np.ndarray,
    gt: GroundTruth,
    assignment: np.ndarray,
    cfg: DiemConfig,
) -> np.ndarray:
    """Two-level classification score from per-point class confidences.

    Each point's relevance is its confidence for the class of the GT box
    it is assigned to; unassigned points (no overlap, or an empty image)
    fall back to their maximum confidence over all classes. The
    ceil(cls_top_fraction * H * W) most relevant points score ``cls_hit``,
    the rest ``cls_miss``; ties at the cut are resolved row-major.
    """
    scores = np.asarray(class_scores, dtype=np.float64)
    if scores.ndim != 3:
        raise ShapeMismatchError(f"class_scores must be (H, W, K), got {scores.shape}")
    h, w, k_classes = scores.shape
    assign = np.asarray(assignment)
    if assign.shape != (h, w):
        raise ShapeMismatchError(
            f"assignment shape {assign.shape} does not match grid ({h}, {w})"
        )
    relevance = scores.max(axis=2)
    if not gt.empty:
        labels = np.asarray(gt.labels, dtype=np.int64)
        if labels.size and labels.max() >= k_classes:
            raise ValueError(
                f"ground-truth label {labels.max()} outside [0, {k_classes})"
            )
        assigned = assign != NO_ASSIGNMENT
        point_label = labels[np.where(assigned, assign, 0)]
        picked = np.take_along_axis(scores, point_label[..., None], axis=2)[..., 0]
        relevance = np.where(assigned, picked, relevance)
    k = ceil_fraction(cfg.cls_top_fraction, h * w)
    out = np.full(h * w, cfg.cls_miss, dtype=np.float64)
    out[top_k_flat_indices(relevance, k)] = cfg.cls_hit
    return out.reshape(h, w)


def task_score(score_r: np.ndarray, score_c: np.ndarray) -> np.ndarray:
    """Combined task importance: elementwise product of the two scores."""
    r = np.asarray(score_r, dtype=np.float64)
    c = np.asarray(score_c, dtype=np.float64)
    if r.shape != c.shape:
        raise ShapeMismatchError(f"score shapes differ: {r.shape} vs {c.shape}")
    return r * c


def score_model(bundle: LevelBundle, gt: GroundTruth, cfg: DiemConfig) -> ScoreMaps:
    """Full importance scoring of one model's outputs on one level."""
    iou_max, assignment = max_iou_with_assignment(bundle.pred_boxes, gt)
    score_r = regression_score(iou_max, cfg)
    score_c = classification_score(bundle.class_scores, gt, assignment, cfg)
    return ScoreMaps(score_r=score_r, score_c=score_c, score=task_score(score_r, score_c))
