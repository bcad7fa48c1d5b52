"""Small shared helpers."""

from __future__ import annotations

import math

import numpy as np


def ceil_fraction(fraction: float, n: int) -> int:
    """Number of points selected by a fractional budget: ceil(fraction * n)."""
    return math.ceil(fraction * n)


def top_k_flat_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Flat indices of the k largest entries, ties broken row-major.

    Uses a stable descending sort, so equal values keep their row-major
    order and the cut at the k-th value is deterministic.
    """
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    order = np.argsort(-flat, kind="stable")
    return order[: max(k, 0)]
