"""Flat binary tensor files and per-level detector-output bundles.

Tensor file layout ("TIDT", version 1), all integers little-endian:

    magic    4 ASCII bytes  b"TIDT"
    version  u32            1
    ndim     u32            1..4
    dims     ndim * u32     extents, each >= 1
    payload  prod(dims) * f32, row-major

Values are stored as 32-bit floats; loaders reject non-finite elements
instead of sanitizing them. A bundle is a small JSON sidecar naming the
tensor files of one pyramid level (feature map, class scores, predicted
boxes) by path relative to the sidecar itself.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ShapeMismatchError, TidError

MAGIC = b"TIDT"
FORMAT_VERSION = 1
MAX_AXES = 4

BUNDLE_KEYS = frozenset({"level_id", "feature", "class_scores", "pred_boxes"})


class TensorIOError(TidError):
    """Base for tensor/bundle file failures; message names the path."""

    def __init__(self, path, message: str):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


class BadMagicError(TensorIOError):
    """The file does not start with the TIDT magic bytes."""


class UnsupportedVersionError(TensorIOError):
    """The file declares a format version this reader does not speak."""


class HeaderError(TensorIOError):
    """Axis count or extents are outside the allowed range."""


class TruncatedPayloadError(TensorIOError):
    """The payload holds fewer values than the header declares."""


class NonFiniteValueError(TensorIOError):
    """A NaN or infinity was found in the payload."""


class BundleError(TensorIOError):
    """Bundle metadata is malformed or its tensors are inconsistent."""


def _atomic_write_bytes(path, blob: bytes) -> None:
    # temp + rename so readers never observe a half-written file
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise TensorIOError(path, f"write failed: {exc}") from exc


def write_tensor(path, values) -> None:
    """Serialize a 1-4 axis float array to ``path`` (stored as f32)."""
    arr = np.asarray(values)
    if arr.ndim < 1 or arr.ndim > MAX_AXES:
        raise HeaderError(path, f"tensors carry 1..{MAX_AXES} axes, got {arr.ndim}")
    if any(d < 1 for d in arr.shape):
        raise HeaderError(path, f"extents must be positive, got {arr.shape}")
    data = np.ascontiguousarray(arr, dtype="<f4")
    if not np.isfinite(data).all():
        raise NonFiniteValueError(path, "refusing to write non-finite values")
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, data.ndim)
    header += struct.pack(f"<{data.ndim}I", *data.shape)
    _atomic_write_bytes(path, header + data.tobytes())


def read_tensor(path) -> np.ndarray:
    """Load a tensor written by :func:`write_tensor`.

    Returns a read-only float32 array. Raises a distinct error kind for
    wrong magic, unsupported version, bad header, short payload, and
    non-finite elements.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(path, "not a TIDT tensor file")
    if len(raw) < 12:
        raise TruncatedPayloadError(path, "header cut short")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(path, f"version {version}, expected {FORMAT_VERSION}")
    if not 1 <= ndim <= MAX_AXES:
        raise HeaderError(path, f"axis count {ndim} outside 1..{MAX_AXES}")
    if len(raw) < 12 + 4 * ndim:
        raise TruncatedPayloadError(path, "dims cut short")
    dims = struct.unpack_from(f"<{ndim}I", raw, 12)
    if any(d < 1 for d in dims):
        raise HeaderError(path, f"extents must be positive, got {dims}")
    count = math.prod(dims)
    offset = 12 + 4 * ndim
    expected = offset + 4 * count
    if len(raw) < expected:
        have = (len(raw) - offset) // 4
        raise TruncatedPayloadError(path, f"declared {count} values, payload holds {have}")
    if len(raw) > expected:
        raise HeaderError(path, f"{len(raw) - expected} trailing bytes after payload")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(dims)
    if not np.isfinite(data).all():
        raise NonFiniteValueError(path, "non-finite element in payload")
    out = data.astype(np.float32)
    out.flags.writeable = False
    return out


def _frozen_f32(values) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=np.float32)
    if arr.flags.writeable:
        arr = arr.copy()
        arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class LevelBundle:
    """One pyramid level's outputs for a single model.

    feature       (C, H, W) backbone feature map
    class_scores  (H, W, K) per-point class confidences in [0, 1]
    pred_boxes    (H, W, 4) per-point predicted boxes, corner form
                  (x1, y1, x2, y2) in feature-cell coordinates
    """

    level_id: int
    feature: np.ndarray
    class_scores: np.ndarray
    pred_boxes: np.ndarray

    def __post_init__(self):
        if int(self.level_id) < 0:
            raise ValueError(f"level_id must be >= 0, got {self.level_id}")
        object.__setattr__(self, "level_id", int(self.level_id))
        for name in ("feature", "class_scores", "pred_boxes"):
            object.__setattr__(self, name, _frozen_f32(getattr(self, name)))
        if self.feature.ndim != 3:
            raise ShapeMismatchError(f"feature must be (C, H, W), got {self.feature.shape}")
        if self.class_scores.ndim != 3:
            raise ShapeMismatchError(
                f"class_scores must be (H, W, K), got {self.class_scores.shape}"
            )
        if self.pred_boxes.ndim != 3 or self.pred_boxes.shape[2] != 4:
            raise ShapeMismatchError(
                f"pred_boxes must be (H, W, 4), got {self.pred_boxes.shape}"
            )
        hw = self.feature.shape[1:]
        if self.class_scores.shape[:2] != hw or self.pred_boxes.shape[:2] != hw:
            raise ShapeMismatchError(
                "H/W disagree: feature "
                f"{self.feature.shape}, class_scores {self.class_scores.shape}, "
                f"pred_boxes {self.pred_boxes.shape}"
            )
        lo = float(self.class_scores.min())
        hi = float(self.class_scores.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"class scores must lie in [0, 1], found [{lo}, {hi}]")

    @property
    def channels(self) -> int:
        return self.feature.shape[0]

    @property
    def height(self) -> int:
        return self.feature.shape[1]

    @property
    def width(self) -> int:
        return self.feature.shape[2]

    @property
    def num_classes(self) -> int:
        return self.class_scores.shape[2]


def load_bundle(meta_path) -> LevelBundle:
    """Load a bundle from its JSON sidecar and cross-validate the tensors."""
    meta_path = Path(meta_path)
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BundleError(meta_path, f"invalid JSON: {exc}") from exc
    if not isinstance(meta, dict) or set(meta) != BUNDLE_KEYS:
        raise BundleError(
            meta_path, f"metadata keys must be exactly {sorted(BUNDLE_KEYS)}"
        )
    if not isinstance(meta["level_id"], int):
        raise BundleError(meta_path, "level_id must be an integer")
    base = meta_path.parent
    tensors = {}
    for key in ("feature", "class_scores", "pred_boxes"):
        ref = meta[key]
        if not isinstance(ref, str):
            raise BundleError(meta_path, f"{key} must be a relative file path")
        tensors[key] = read_tensor(base / ref)
    try:
        return LevelBundle(level_id=meta["level_id"], **tensors)
    except (ShapeMismatchError, ValueError) as exc:
        raise BundleError(meta_path, str(exc)) from exc


def save_bundle(meta_path, bundle: LevelBundle, prefix: str = "") -> Path:
    """Write the bundle's tensors next to ``meta_path`` plus the JSON sidecar."""
    meta_path = Path(meta_path)
    base = meta_path.parent
    names = {}
    for key in ("feature", "class_scores", "pred_boxes"):
        names[key] = f"{prefix}{key}.tidt"
        write_tensor(base / names[key], getattr(bundle, key))
    meta = {"level_id": bundle.level_id, **names}
    blob = json.dumps(meta, indent=2, sort_keys=True).encode("utf-8") + b"\n"
    _atomic_write_bytes(meta_path, blob)
    return meta_path
