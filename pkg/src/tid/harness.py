"""Deterministic synthetic scenes and a desk-scale optimization harness.

A scene stands in for one image's detector outputs: seeded ground-truth
boxes, smooth object-centered feature bumps plus noise, and per-point
predicted boxes / class scores where the teacher is accurate near objects
and the student is a degraded copy. The simulation runs plain gradient
descent on the raw student feature tensor against the masked
feature-imitation loss, which keeps convergence behavior provable and
fast while exercising the full scoring/masking pipeline, including the
ablation switches.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .diem import DiemConfig, ScoreMaps, classification_score, regression_score, score_model, task_score
from .errors import ConfigError, TidError
from .geometry import BBox, GroundTruth, max_iou_with_assignment
from .ldam import LdamConfig, OutputValueMap, key_score, output_value, weak_area, weak_score
from .sfdm import (
    SfdmConfig,
    Tier,
    ValueMaps,
    build_value_maps,
    distill_loss,
    object_mask,
)
from .tensorio import LevelBundle


class ScenePlacementError(TidError):
    """Objects of the requested size cannot fit on the grid."""


class SimulationDivergedError(TidError):
    """The loss became non-finite during optimization."""

    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


@dataclass(frozen=True)
class SceneSpec:
    """Knobs for one synthetic scene."""

    seed: int = 0
    height: int = 32
    width: int = 32
    channels: int = 8
    num_classes: int = 4
    n_objects: int = 3
    teacher_noise: float = 0.1
    student_noise: float = 0.6
    min_object_size: float = 4.0
    max_object_size: float = 10.0

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        for name in ("height", "width", "channels", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_objects < 0:
            raise ConfigError(f"n_objects must be >= 0, got {self.n_objects}")
        for name in ("teacher_noise", "student_noise"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 < self.min_object_size <= self.max_object_size:
            raise ConfigError(
                "need 0 < min_object_size <= max_object_size, got "
                f"{self.min_object_size}..{self.max_object_size}"
            )


class AblationMode(str, Enum):
    """Which part of the masking pipeline a simulation exercises."""

    FULL = "full"
    CLS_ONLY = "cls_only"
    REG_ONLY = "reg_only"
    KEY_ONLY = "key_only"
    WEAK_ONLY = "weak_only"
    RAW_IOU = "raw_iou"
    BASELINE_BG_OBJ = "baseline_bg_obj"
    UNMASKED = "unmasked"


# teacher box accuracy decays away from objects with this length scale (cells)
_BLEND_TAU = 3.0


def _sorted_clipped_boxes(raw: np.ndarray, w: int, h: int) -> np.ndarray:
    """Order each box's corners and clip to the grid."""
    x_lo = np.minimum(raw[..., 0], raw[..., 2])
    x_hi = np.maximum(raw[..., 0], raw[..., 2])
    y_lo = np.minimum(raw[..., 1], raw[..., 3])
    y_hi = np.maximum(raw[..., 1], raw[..., 3])
    out = np.stack(
        [
            np.clip(x_lo, 0.0, w),
            np.clip(y_lo, 0.0, h),
            np.clip(x_hi, 0.0, w),
            np.clip(y_hi, 0.0, h),
        ],
        axis=-1,
    )
    return out


def generate_scene(spec: SceneSpec) -> tuple[LevelBundle, LevelBundle, GroundTruth]:
    """Build one seeded scene: (teacher bundle, student bundle, ground truth).

    Identical specs produce bitwise-identical bundles. The student's
    predicted boxes, class scores, and features are the teacher's degraded
    by ``student_noise``; with ``student_noise=0`` the two bundles match
    exactly.
    """
    h, w, c, k = spec.height, spec.width, spec.channels, spec.num_classes
    if spec.n_objects > 0 and spec.max_object_size > min(h, w):
        raise ScenePlacementError(
            f"objects up to {spec.max_object_size} cells cannot fit a "
            f"{h}x{w} grid"
        )
    rng = np.random.default_rng(spec.seed)

    boxes: list[BBox] = []
    labels: list[int] = []
    for _ in range(spec.n_objects):
        bw = rng.uniform(spec.min_object_size, spec.max_object_size)
        bh = rng.uniform(spec.min_object_size, spec.max_object_size)
        x1 = rng.uniform(0.0, w - bw)
        y1 = rng.uniform(0.0, h - bh)
        boxes.append(BBox(x1, y1, x1 + bw, y1 + bh))
        labels.append(int(rng.integers(0, k)))
    gt = GroundTruth(boxes=tuple(boxes), labels=tuple(labels))

    ys = np.arange(h, dtype=np.float64) + 0.5
    xs = np.arange(w, dtype=np.float64) + 0.5

    # teacher features: per-object smooth bumps plus noise
    base = np.zeros((c, h, w), dtype=np.float64)
    for box in boxes:
        amps = rng.uniform(0.5, 1.5, size=c)
        cx, cy = box.center
        sigma = max(0.25 * (box.width + box.height), 1.0)
        bump = np.exp(
            -((xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2) / (2.0 * sigma**2)
        )
        base += amps[:, None, None] * bump[None, :, :]
    feature_t = base + spec.teacher_noise * rng.standard_normal((c, h, w))

    # per-point base box: the nearest GT box near objects, shrinking to the
    # point's own cell in far background
    cell_boxes = np.stack(
        [
            np.broadcast_to(xs[None, :] - 0.5, (h, w)),
            np.broadcast_to(ys[:, None] - 0.5, (h, w)),
            np.broadcast_to(xs[None, :] + 0.5, (h, w)),
            np.broadcast_to(ys[:, None] + 0.5, (h, w)),
        ],
        axis=-1,
    )
    if boxes:
        dists = np.stack(
            [
                np.hypot(
                    np.maximum(np.maximum(b.x1 - xs, 0.0), xs - b.x2)[None, :],
                    np.maximum(np.maximum(b.y1 - ys, 0.0), ys - b.y2)[:, None],
                )
                for b in boxes
            ],
            axis=-1,
        )
        nearest = dists.argmin(axis=2)
        d_near = np.take_along_axis(dists, nearest[..., None], axis=2)[..., 0]
        blend = np.exp(-(d_near**2) / (2.0 * _BLEND_TAU**2))
        box_arr = gt.box_array()[nearest]
        nearest_label = np.asarray(gt.labels, dtype=np.int64)[nearest]
        base_boxes = blend[..., None] * box_arr + (1.0 - blend[..., None]) * cell_boxes
    else:
        blend = np.zeros((h, w), dtype=np.float64)
        base_boxes = cell_boxes

    jitter_t = 0.1 + 0.5 * spec.teacher_noise
    raw_t = base_boxes + jitter_t * rng.standard_normal((h, w, 4))
    raw_s = raw_t + spec.student_noise * rng.standard_normal((h, w, 4))
    pred_t = _sorted_clipped_boxes(raw_t, w, h)
    pred_s = _sorted_clipped_boxes(raw_s, w, h)

    # class scores: confident on the nearest object's class near objects
    cls_t = rng.uniform(0.0, 0.2, size=(h, w, k))
    if boxes:
        peak = np.clip(
            0.92 * blend + 0.04 + 0.05 * spec.teacher_noise * rng.standard_normal((h, w)),
            0.0,
            1.0,
        )
        np.put_along_axis(cls_t, nearest_label[..., None], peak[..., None], axis=2)

    flatten = min(0.5 * spec.student_noise, 0.85)
    cls_s = np.clip(
        (1.0 - flatten) * cls_t
        + flatten * 0.25
        + 0.08 * spec.student_noise * rng.standard_normal((h, w, k)),
        0.0,
        1.0,
    )
    feature_s = feature_t + spec.student_noise * rng.standard_normal((c, h, w))

    teacher = LevelBundle(
        level_id=0, feature=feature_t, class_scores=cls_t, pred_boxes=pred_t
    )
    student = LevelBundle(
        level_id=0, feature=feature_s, class_scores=cls_s, pred_boxes=pred_s
    )
    return teacher, student, gt


@dataclass(frozen=True)
class PipelineResult:
    """Everything the masking pipeline produced for one (scene, mode) pair."""

    mode: AblationMode
    score_t: ScoreMaps
    score_s: ScoreMaps
    output_map: OutputValueMap
    value_maps: ValueMaps
    mask: np.ndarray
    tier_labels: np.ndarray


def _mode_scores(
    bundle: LevelBundle, gt: GroundTruth, cfg: DiemConfig, mode: AblationMode
) -> ScoreMaps:
    if mode in (AblationMode.FULL, AblationMode.KEY_ONLY, AblationMode.WEAK_ONLY):
        return score_model(bundle, gt, cfg)
    iou_max, assignment = max_iou_with_assignment(bundle.pred_boxes, gt)
    if mode is AblationMode.CLS_ONLY:
        score_r = np.ones_like(iou_max)
    elif mode is AblationMode.RAW_IOU:
        score_r = 2.0 * iou_max
    else:
        score_r = regression_score(iou_max, cfg)
    if mode is AblationMode.REG_ONLY:
        score_c = np.ones_like(iou_max)
    else:
        score_c = classification_score(bundle.class_scores, gt, assignment, cfg)
    return ScoreMaps(score_r=score_r, score_c=score_c, score=task_score(score_r, score_c))


def compute_pipeline(
    teacher: LevelBundle,
    student: LevelBundle,
    gt: GroundTruth,
    diem_cfg: DiemConfig,
    ldam_cfg: LdamConfig,
    sfdm_cfg: SfdmConfig,
    mode: AblationMode = AblationMode.FULL,
) -> PipelineResult:
    """Run scoring -> assessment -> decoupling with the mode's forcing applied."""
    score_t = _mode_scores(teacher, gt, diem_cfg, mode)
    score_s = _mode_scores(student, gt, diem_cfg, mode)
    shape = score_t.score.shape

    if mode is AblationMode.KEY_ONLY:
        keys = key_score(score_t.score, ldam_cfg)
        weak_points: tuple = ()
        weaks = np.ones(shape, dtype=np.float64)
    elif mode is AblationMode.WEAK_ONLY:
        keys = np.full(shape, ldam_cfg.key_base, dtype=np.float64)
        weak_points = tuple(weak_area(score_t.score, score_s.score, ldam_cfg))
        weaks = weak_score(weak_points, shape, ldam_cfg)
    else:
        keys = key_score(score_t.score, ldam_cfg)
        weak_points = tuple(weak_area(score_t.score, score_s.score, ldam_cfg))
        weaks = weak_score(weak_points, shape, ldam_cfg)
    output_map = OutputValueMap(
        score_key=keys,
        score_weak=weaks,
        v_output=output_value(keys, weaks),
        weak_points=weak_points,
    )
    value_maps = build_value_maps(output_map.v_output, gt, sfdm_cfg)

    if mode is AblationMode.BASELINE_BG_OBJ:
        obj = object_mask(shape, gt)
        mask = np.where(obj > 0.0, sfdm_cfg.alpha_obj, sfdm_cfg.alpha_bg)
        tier_labels = np.where(obj > 0.0, int(Tier.HIGH), int(Tier.LOW)).astype(np.int8)
    elif mode is AblationMode.UNMASKED:
        mask = np.ones(shape, dtype=np.float64)
        tier_labels = value_maps.tier_labels
    else:
        mask = value_maps.mask
        tier_labels = value_maps.tier_labels
    return PipelineResult(
        mode=mode,
        score_t=score_t,
        score_s=score_s,
        output_map=output_map,
        value_maps=value_maps,
        mask=mask,
        tier_labels=tier_labels,
    )


def safe_step_size(mask: np.ndarray, n_elements: int) -> float:
    """Largest provably monotone gradient step: (C*H*W) / (2 * max mask)."""
    peak = float(np.asarray(mask).max()) if np.asarray(mask).size else 0.0
    if peak <= 0.0:
        return 1.0  # all-zero mask: the gradient is zero, any step is inert
    return n_elements / (2.0 * peak)


@dataclass(frozen=True)
class SimulationReport:
    """Loss/residual trajectories plus the maps and config of one run."""

    mode: AblationMode
    steps: int
    step_size: float
    seed: int
    loss_curve: list[float]
    residual_curves: dict[str, list[float]]
    tier_populations: dict[str, int]
    value_map: np.ndarray
    mask: np.ndarray
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "steps": self.steps,
            "step_size": self.step_size,
            "seed": self.seed,
            "loss_curve": list(self.loss_curve),
            "residual_curves": {k: list(v) for k, v in self.residual_curves.items()},
            "tier_populations": dict(self.tier_populations),
            "value_map": self.value_map.tolist(),
            "mask": self.mask.tolist(),
            "config": dict(self.config),
        }


_TIER_NAMES = {Tier.HIGH: "high", Tier.MED: "med", Tier.LOW: "low"}


def run_simulation(
    spec: SceneSpec,
    mode: AblationMode,
    steps: int,
    step_size: float | None = None,
    diem_cfg: DiemConfig | None = None,
    ldam_cfg: LdamConfig | None = None,
    sfdm_cfg: SfdmConfig | None = None,
) -> SimulationReport:
    """Gradient descent on the student features under the mode's mask.

    ``step_size`` is the absolute descent step; ``None`` selects the safe
    step for the mode's mask (see :func:`safe_step_size`), under which the
    loss is non-increasing at every step. Residual curves report the raw
    per-tier mean squared feature gap on the tier regions of the FULL
    pipeline, so runs of different modes are directly comparable.
    """
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if step_size is not None and not step_size > 0.0:
        raise ConfigError(f"step_size must be > 0, got {step_size}")
    diem_cfg = diem_cfg or DiemConfig()
    ldam_cfg = ldam_cfg or LdamConfig()
    sfdm_cfg = sfdm_cfg or SfdmConfig()

    teacher, student, gt = generate_scene(spec)
    pipe = compute_pipeline(teacher, student, gt, diem_cfg, ldam_cfg, sfdm_cfg, mode)
    if mode is AblationMode.FULL:
        reference = pipe
    else:
        reference = compute_pipeline(
            teacher, student, gt, diem_cfg, ldam_cfg, sfdm_cfg, AblationMode.FULL
        )

    t64 = teacher.feature.astype(np.float64)
    s64 = student.feature.astype(np.float64)
    eta = step_size if step_size is not None else safe_step_size(pipe.mask, t64.size)

    regions = {
        tier: reference.value_maps.tier_labels == int(tier) for tier in Tier
    }
    loss_curve: list[float] = []
    residual_curves: dict[str, list[float]] = {name: [] for name in _TIER_NAMES.values()}
    for step_idx in range(steps + 1):
        report = distill_loss(t64, s64, pipe.mask, pipe.tier_labels)
        if not math.isfinite(report.total):
            raise SimulationDivergedError(step_idx)
        loss_curve.append(report.total)
        sq = (t64 - s64) ** 2
        for tier, name in _TIER_NAMES.items():
            cells = regions[tier]
            residual_curves[name].append(
                float(sq[:, cells].mean()) if cells.any() else 0.0
            )
        if step_idx < steps:
            s64 = s64 - eta * report.grad_student

    populations = {
        name: int(regions[tier].sum()) for tier, name in _TIER_NAMES.items()
    }
    config = {
        **dataclasses.asdict(spec),
        **dataclasses.asdict(diem_cfg),
        **dataclasses.asdict(ldam_cfg),
        **dataclasses.asdict(sfdm_cfg),
    }
    return SimulationReport(
        mode=mode,
        steps=steps,
        step_size=eta,
        seed=spec.seed,
        loss_curve=loss_curve,
        residual_curves=residual_curves,
        tier_populations=populations,
        value_map=reference.value_maps.v,
        mask=pipe.mask,
        config=config,
    )
