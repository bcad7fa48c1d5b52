"""Selective feature decoupling.

Combines the output value with a spatial information prior around the
ground-truth boxes, splits the grid into high/medium/low value tiers,
and evaluates the masked feature-imitation loss together with its
analytic gradient with respect to the student features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .geometry import GroundTruth


class Tier(IntEnum):
    LOW = 0
    MED = 1
    HIGH = 2


@dataclass(frozen=True)
class SfdmConfig:
    """Decoupling knobs.

    ``vicinity_scale`` expands each GT box about its center to form the
    decay region of the information prior; ``tier_hi``/``tier_lo`` split
    the value range into tiers and ``w_*`` are the tier multipliers.
    ``alpha_bg``/``alpha_obj`` balance the background/object baseline.
    """

    vicinity_scale: float = 2.0
    tier_hi: float = 1.0
    tier_lo: float = 0.01
    w_hi: float = 1.0
    w_med: float = 0.7
    w_lo: float = 0.05
    alpha_bg: float = 0.5
    alpha_obj: float = 1.0

    def __post_init__(self):
        if self.vicinity_scale <= 1.0:
            raise ConfigError(f"vicinity_scale must be > 1, got {self.vicinity_scale}")
        if not self.tier_lo < self.tier_hi:
            raise ConfigError(
                f"need tier_lo < tier_hi, got {self.tier_lo} >= {self.tier_hi}"
            )
        for name in ("w_hi", "w_med", "w_lo", "alpha_bg", "alpha_obj"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")


@dataclass(frozen=True)
class ValueMaps:
    """Information value, output value, combined value, mask, and tiers."""

    v_info: np.ndarray
    v_output: np.ndarray
    v: np.ndarray
    mask: np.ndarray
    tier_labels: np.ndarray


@dataclass(frozen=True)
class LossReport:
    """Masked feature loss, its per-tier split, and the student gradient."""

    total: float
    per_tier: dict[Tier, float]
    grad_student: np.ndarray


def _cell_centers(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys = np.arange(h, dtype=np.float64) + 0.5
    xs = np.arange(w, dtype=np.float64) + 0.5
    return ys, xs


def information_value(
    shape: tuple[int, int], gt: GroundTruth, cfg: SfdmConfig
) -> np.ndarray:
    """Spatial prior: 1 inside a GT box, linear decay through its vicinity.

    The vicinity is the box scaled by ``vicinity_scale`` about its center.
    Inside it the value is 1 - d / dists, where d is the distance to the
    box and dists the largest distance any vicinity point attains, so the
    value fades to 0 toward the vicinity's far corners. Cells outside all
    vicinities are 0; overlapping vicinities keep the maximum.
    """
    h, w = shape
    out = np.zeros((h, w), dtype=np.float64)
    if gt.empty:
        return out
    ys, xs = _cell_centers(h, w)
    scale = cfg.vicinity_scale
    for box in gt.boxes:
        cx, cy = box.center
        half_w = 0.5 * box.width
        half_h = 0.5 * box.height
        dists = math.hypot((scale - 1.0) * half_w, (scale - 1.0) * half_h)
        dx = np.maximum(np.maximum(box.x1 - xs, 0.0), xs - box.x2)
        dy = np.maximum(np.maximum(box.y1 - ys, 0.0), ys - box.y2)
        d = np.hypot(dx[None, :], dy[:, None])
        in_vicinity = (np.abs(xs - cx) <= scale * half_w)[None, :] & (
            np.abs(ys - cy) <= scale * half_h
        )[:, None]
        value = np.where(in_vicinity, np.clip(1.0 - d / dists, 0.0, 1.0), 0.0)
        np.maximum(out, value, out=out)
    return out


def feature_value(v_output: np.ndarray, v_info: np.ndarray) -> np.ndarray:
    """Final per-point value: elementwise product of output and info values."""
    vo = np.asarray(v_output, dtype=np.float64)
    vi = np.asarray(v_info, dtype=np.float64)
    if vo.shape != vi.shape:
        raise ShapeMismatchError(f"value shapes differ: {vo.shape} vs {vi.shape}")
    return vo * vi


def tier_mask(v: np.ndarray, cfg: SfdmConfig) -> tuple[np.ndarray, np.ndarray]:
    """Tiered mask: the value scaled by its tier's multiplier.

    HIGH (v >= tier_hi) keeps w_hi * v, MED (tier_lo <= v < tier_hi) gets
    w_med * v, LOW (v < tier_lo) is suppressed to w_lo * v. Returns
    (mask, tier_labels).
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.isfinite(v).all() or (v.size and v.min() < 0.0):
        raise ValueError("value map must be finite and nonnegative")
    labels = np.where(
        v >= cfg.tier_hi, int(Tier.HIGH), np.where(v >= cfg.tier_lo, int(Tier.MED), int(Tier.LOW))
    ).astype(np.int8)
    multipliers = np.array([cfg.w_lo, cfg.w_med, cfg.w_hi], dtype=np.float64)
    return multipliers[labels] * v, labels


def build_value_maps(
    v_output: np.ndarray, gt: GroundTruth, cfg: SfdmConfig
) -> ValueMaps:
    """Compose information value, combined value, and the tiered mask."""
    vo = np.asarray(v_output, dtype=np.float64)
    vi = information_value(vo.shape, gt, cfg)
    v = feature_value(vo, vi)
    mask, labels = tier_mask(v, cfg)
    return ValueMaps(v_info=vi, v_output=vo, v=v, mask=mask, tier_labels=labels)


def align(
    student_feature: np.ndarray,
    target_shape: tuple[int, int, int],
    projection: np.ndarray | None = None,
) -> np.ndarray:
    """Bring a student feature map onto the teacher's (C, H, W) shape.

    Already-matching inputs pass through untouched. Otherwise a supplied
    (C, C_s) channel projection is applied, then nearest-neighbor
    resampling (source index = floor(i * src_extent / dst_extent)) maps the
    spatial grid onto (H, W).
    """
    s = np.asarray(student_feature)
    if s.ndim != 3:
        raise ShapeMismatchError(f"student feature must be (C, H, W), got {s.shape}")
    target = tuple(int(d) for d in target_shape)
    if s.shape == target:
        return s
    if projection is None:
        raise ShapeMismatchError(
            f"student shape {s.shape} differs from target {target} and no "
            "projection was supplied"
        )
    c, h, w = target
    proj = np.asarray(projection, dtype=np.float64)
    if proj.shape != (c, s.shape[0]):
        raise ShapeMismatchError(
            f"projection must be {(c, s.shape[0])}, got {proj.shape}"
        )
    projected = np.tensordot(proj, s.astype(np.float64), axes=([1], [0]))
    rows = (np.arange(h) * s.shape[1]) // h
    cols = (np.arange(w) * s.shape[2]) // w
    return projected[:, rows[:, None], cols[None, :]]


def distill_loss(
    teacher: np.ndarray,
    student_aligned: np.ndarray,
    mask: np.ndarray,
    tier_labels: np.ndarray,
) -> LossReport:
    """Masked mean-squared feature loss with its analytic student gradient.

    total = (1 / (C*H*W)) * sum_{c,i,j} mask[i,j] * (T - S)^2, split by
    tier label; grad wrt the student feature is
    -(2 / (C*H*W)) * mask * (T - S).
    """
    t = np.asarray(teacher, dtype=np.float64)
    s = np.asarray(student_aligned, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    labels = np.asarray(tier_labels)
    if t.shape != s.shape:
        raise ShapeMismatchError(f"feature shapes differ: {t.shape} vs {s.shape}")
    if t.ndim != 3:
        raise ShapeMismatchError(f"features must be (C, H, W), got {t.shape}")
    if m.shape != t.shape[1:] or labels.shape != t.shape[1:]:
        raise ShapeMismatchError(
            f"mask {m.shape} / tier labels {labels.shape} must match grid {t.shape[1:]}"
        )
    if m.size and m.min() < 0.0:
        raise ValueError("mask must be nonnegative")
    n = t.size
    diff = t - s
    weighted = m[None, :, :] * diff * diff
    per_tier = {
        tier: float(weighted[:, labels == int(tier)].sum() / n) for tier in Tier
    }
    total = per_tier[Tier.HIGH] + per_tier[Tier.MED] + per_tier[Tier.LOW]
    grad = (-2.0 / n) * m[None, :, :] * diff
    return LossReport(total=total, per_tier=per_tier, grad_student=grad)


def object_mask(shape: tuple[int, int], gt: GroundTruth) -> np.ndarray:
    """1.0 at cells whose center lies inside any GT box, else 0.0."""
    h, w = shape
    out = np.zeros((h, w), dtype=np.float64)
    if gt.empty:
        return out
    ys, xs = _cell_centers(h, w)
    for box in gt.boxes:
        inside = ((xs >= box.x1) & (xs <= box.x2))[None, :] & (
            (ys >= box.y1) & (ys <= box.y2)
        )[:, None]
        out[inside] = 1.0
    return out


def baseline_bg_obj_loss(
    teacher: np.ndarray,
    student_aligned: np.ndarray,
    gt: GroundTruth,
    cfg: SfdmConfig,
) -> LossReport:
    """Two-region comparison baseline: object cells vs background cells.

    Equivalent to the tiered loss with mask alpha_obj inside GT boxes and
    alpha_bg outside; the per-tier split reports the object term under
    HIGH and the background term under LOW.
    """
    t = np.asarray(teacher, dtype=np.float64)
    if t.ndim != 3:
        raise ShapeMismatchError(f"features must be (C, H, W), got {t.shape}")
    obj = object_mask(t.shape[1:], gt)
    mask = np.where(obj > 0.0, cfg.alpha_obj, cfg.alpha_bg)
    labels = np.where(obj > 0.0, int(Tier.HIGH), int(Tier.LOW)).astype(np.int8)
    return distill_loss(t, student_aligned, mask, labels)
