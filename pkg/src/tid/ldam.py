"""Learning-dynamics assessment.

Key areas keep the highest teacher task scores; weak areas are the
spatially-suppressed peaks of the teacher-minus-student score gap, i.e.
where the student currently underperforms. Both combine multiplicatively
into the per-point output value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._util import ceil_fraction, top_k_flat_indices
from .errors import ConfigError, ShapeMismatchError
from .geometry import Point, greedy_suppress


@dataclass(frozen=True)
class LdamConfig:
    gamma_key: float = 0.10
    gamma_weak: float = 0.10
    weak_bonus: float = 1.5
    key_base: float = 1.0
    nms_radius: int = 3

    def __post_init__(self):
        if not 0.0 < self.gamma_key <= 1.0:
            raise ConfigError(f"gamma_key must be in (0, 1], got {self.gamma_key}")
        if not 0.0 < self.gamma_weak <= 1.0:
            raise ConfigError(f"gamma_weak must be in (0, 1], got {self.gamma_weak}")
        if self.weak_bonus < 1.0:
            raise ConfigError(f"weak_bonus must be >= 1, got {self.weak_bonus}")
        if self.key_base <= 0.0:
            raise ConfigError(f"key_base must be > 0, got {self.key_base}")
        if self.nms_radius < 0:
            raise ConfigError(f"nms_radius must be >= 0, got {self.nms_radius}")


@dataclass(frozen=True)
class OutputValueMap:
    """Key score, weak score, their product, and the selected weak points."""

    score_key: np.ndarray
    score_weak: np.ndarray
    v_output: np.ndarray
    weak_points: tuple[Point, ...]


def key_score(score_t: np.ndarray, cfg: LdamConfig) -> np.ndarray:
    """Keep the teacher score on the top-gamma_key points, key_base elsewhere.

    Ties at the cut are resolved row-major.
    """
    score_t = np.asarray(score_t, dtype=np.float64)
    h, w = score_t.shape
    k = ceil_fraction(cfg.gamma_key, h * w)
    out = np.full(h * w, cfg.key_base, dtype=np.float64)
    idx = top_k_flat_indices(score_t, k)
    out[idx] = score_t.reshape(-1)[idx]
    return out.reshape(h, w)


def weak_area(
    score_t: np.ndarray, score_s: np.ndarray, cfg: LdamConfig
) -> list[Point]:
    """Points where the student lags the teacher most, spatially suppressed.

    Candidates are points with a strictly positive teacher-minus-student
    gap, ranked by the gap; greedy suppression with ``nms_radius`` keeps at
    most ceil(gamma_weak * H * W) of them so the selection is not a single
    tight cluster. Returned in row-major order.
    """
    t = np.asarray(score_t, dtype=np.float64)
    s = np.asarray(score_s, dtype=np.float64)
    if t.shape != s.shape:
        raise ShapeMismatchError(f"score shapes differ: {t.shape} vs {s.shape}")
    h, w = t.shape
    diff = t - s
    rows, cols = np.nonzero(diff > 0.0)
    candidates = [
        ((int(r), int(c)), float(diff[r, c])) for r, c in zip(rows, cols)
    ]
    kept = greedy_suppress(
        candidates, radius=cfg.nms_radius, max_keep=ceil_fraction(cfg.gamma_weak, h * w)
    )
    return sorted(kept)


def weak_score(
    weak_points, shape: tuple[int, int], cfg: LdamConfig
) -> np.ndarray:
    """weak_bonus at the weak points, 1.0 everywhere else.

    Points outside the weak areas are deliberately left unscaled; only the
    weak areas get extra emphasis.
    """
    h, w = shape
    out = np.ones((h, w), dtype=np.float64)
    for r, c in weak_points:
        if not (0 <= r < h and 0 <= c < w):
            raise ValueError(f"weak point ({r}, {c}) outside {h}x{w} grid")
        out[r, c] = cfg.weak_bonus
    return out


def output_value(score_key_map: np.ndarray, score_weak_map: np.ndarray) -> np.ndarray:
    """Per-point output value: elementwise product of key and weak scores."""
    k = np.asarray(score_key_map, dtype=np.float64)
    w = np.asarray(score_weak_map, dtype=np.float64)
    if k.shape != w.shape:
        raise ShapeMismatchError(f"score shapes differ: {k.shape} vs {w.shape}")
    return k * w


def output_value_map(
    score_t: np.ndarray, score_s: np.ndarray, cfg: LdamConfig
) -> OutputValueMap:
    """Full assessment from teacher and student task-score maps."""
    t = np.asarray(score_t, dtype=np.float64)
    keys = key_score(t, cfg)
    weak_points = tuple(weak_area(t, score_s, cfg))
    weaks = weak_score(weak_points, t.shape, cfg)
    return OutputValueMap(
        score_key=keys,
        score_weak=weaks,
        v_output=output_value(keys, weaks),
        weak_points=weak_points,
    )
