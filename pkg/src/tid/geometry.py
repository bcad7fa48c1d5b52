"""Box arithmetic, IoU maps, point-box distances, and greedy suppression.

All geometry lives in feature-cell coordinates. Grid points are indexed
(row, col) and sit at cell centers (col + 0.5, row + 0.5) whenever they
are treated as geometric points.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NO_ASSIGNMENT = -1

Point = tuple[int, int]  # (row, col)


class EmptyGroundTruthWarning(UserWarning):
    """An image carried no ground-truth boxes; IoU maps are all-zero."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, corner form. Degenerate (zero-area) boxes allowed."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box coordinates must be finite, got {vals}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"box corners out of order: {vals}")

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
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


def _as_bbox(b) -> BBox:
    if isinstance(b, BBox):
        return b
    return BBox(*(float(v) for v in b))


@dataclass(frozen=True)
class GroundTruth:
    """Annotated boxes for one image. Every box must have positive area."""

    boxes: tuple[BBox, ...]
    labels: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(_as_bbox(b) for b in self.boxes))
        object.__setattr__(self, "labels", tuple(int(l) for l in self.labels))
        if len(self.boxes) != len(self.labels):
            raise ValueError(
                f"{len(self.boxes)} boxes vs {len(self.labels)} labels"
            )
        for box in self.boxes:
            if box.area <= 0.0:
                raise ValueError(f"ground-truth boxes need positive area: {box}")
        for label in self.labels:
            if label < 0:
                raise ValueError(f"labels must be >= 0, got {label}")

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def empty(self) -> bool:
        return len(self.boxes) == 0

    def box_array(self) -> np.ndarray:
        """Boxes as an (M, 4) float64 array."""
        return np.array([b.as_tuple() for b in self.boxes], dtype=np.float64).reshape(
            len(self.boxes), 4
        )


def load_ground_truth(path) -> GroundTruth:
    """Read a JSON array of {"box": [x1, y1, x2, y2], "label": int} records."""
    entries = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(entries, list):
        raise ValueError(f"{path}: ground truth must be a JSON array")
    boxes, labels = [], []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or set(entry) != {"box", "label"}:
            raise ValueError(f"{path}: entry {i} must carry exactly 'box' and 'label'")
        boxes.append(_as_bbox(entry["box"]))
        labels.append(int(entry["label"]))
    return GroundTruth(boxes=tuple(boxes), labels=tuple(labels))


def save_ground_truth(path, gt: GroundTruth) -> None:
    records = [
        {"box": list(b.as_tuple()), "label": l} for b, l in zip(gt.boxes, gt.labels)
    ]
    Path(path).write_text(json.dumps(records, indent=2) + "\n", encoding="utf-8")


def iou(a, b) -> float:
    """Intersection over union of two boxes; 0 when the union has no area."""
    a = _as_bbox(a)
    b = _as_bbox(b)
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = iw * ih if iw > 0.0 and ih > 0.0 else 0.0
    union = a.area + b.area - inter
    return inter / union if union > 0.0 else 0.0


def _grid_iou_matrix(pred_boxes: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    """IoU between every grid prediction (N, 4) and every GT box (M, 4).

    Inverted prediction corners are treated as degenerate (zero area), so
    every entry lands in [0, 1].
    """
    p = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(p[:, None, 2], g[None, :, 2]) - np.maximum(p[:, None, 0], g[None, :, 0])
    ih = np.minimum(p[:, None, 3], g[None, :, 3]) - np.maximum(p[:, None, 1], g[None, :, 1])
    inter = np.where((iw > 0.0) & (ih > 0.0), iw * ih, 0.0)
    area_p = np.clip(p[:, 2] - p[:, 0], 0.0, None) * np.clip(p[:, 3] - p[:, 1], 0.0, None)
    area_g = (g[:, 2] - g[:, 0]) * (g[:, 3] - g[:, 1])
    union = area_p[:, None] + area_g[None, :] - inter
    return np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)


def max_iou_with_assignment(
    pred_boxes: np.ndarray, gt: GroundTruth
) -> tuple[np.ndarray, np.ndarray]:
    """Per-point best IoU against GT plus the index of the best GT box.

    Points with zero overlap (and every point of an empty image) map to
    ``NO_ASSIGNMENT``. Ties pick the lowest GT index.
    """
    pred = np.asarray(pred_boxes, dtype=np.float64)
    if pred.ndim != 3 or pred.shape[2] != 4:
        raise ValueError(f"pred_boxes must be (H, W, 4), got {pred.shape}")
    h, w = pred.shape[:2]
    if gt.empty:
        warnings.warn(
            "image has no ground-truth boxes; IoU map is all-zero",
            EmptyGroundTruthWarning,
            stacklevel=2,
        )
        return np.zeros((h, w)), np.full((h, w), NO_ASSIGNMENT, dtype=np.int64)
    matrix = _grid_iou_matrix(pred, gt.box_array())
    best = matrix.argmax(axis=1)
    best_iou = matrix[np.arange(matrix.shape[0]), best]
    assign = np.where(best_iou > 0.0, best, NO_ASSIGNMENT)
    return best_iou.reshape(h, w), assign.reshape(h, w)


def max_iou_map(pred_boxes: np.ndarray, gt: GroundTruth) -> np.ndarray:
    """Per-point maximum IoU between the predicted box and any GT box."""
    best_iou, _ = max_iou_with_assignment(pred_boxes, gt)
    return best_iou


def point_to_box_distance(p: Sequence[float], box) -> float:
    """Euclidean distance from point (x, y) to the closed box; 0 inside."""
    box = _as_bbox(box)
    x, y = float(p[0]), float(p[1])
    dx = max(box.x1 - x, 0.0, x - box.x2)
    dy = max(box.y1 - y, 0.0, y - box.y2)
    return math.hypot(dx, dy)


def greedy_suppress(
    candidates: Iterable[tuple[Point, float]], radius: int, max_keep: int
) -> list[Point]:
    """Greedy non-maximum suppression on grid points.

    Repeatedly keeps the highest-scoring remaining candidate and drops all
    candidates within Chebyshev distance <= radius of it, until ``max_keep``
    points are kept or none remain. Score ties fall back to row-major
    order, smaller (row, col) first.
    """
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    if max_keep < 0:
        raise ValueError(f"max_keep must be >= 0, got {max_keep}")
    ranked = sorted(
        ((tuple(pt), float(score)) for pt, score in candidates),
        key=lambda c: (-c[1], c[0][0], c[0][1]),
    )
    kept: list[Point] = []
    alive = [True] * len(ranked)
    for i, (pt, _) in enumerate(ranked):
        if len(kept) >= max_keep:
            break
        if not alive[i]:
            continue
        kept.append(pt)
        for j in range(i + 1, len(ranked)):
            if alive[j]:
                other = ranked[j][0]
                if max(abs(other[0] - pt[0]), abs(other[1] - pt[1])) <= radius:
                    alive[j] = False
    return kept
