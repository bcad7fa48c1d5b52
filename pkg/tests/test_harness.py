import warnings

import numpy as np
import pytest

from tid.diem import DiemConfig
from tid.errors import ConfigError
from tid.geometry import max_iou_map
from tid.harness import (
    AblationMode,
    SceneSpec,
    ScenePlacementError,
    compute_pipeline,
    generate_scene,
    run_simulation,
    safe_step_size,
)
from tid.ldam import LdamConfig
from tid.sfdm import SfdmConfig

DIEM = DiemConfig()
LDAM = LdamConfig()
SFDM = SfdmConfig()

SMALL = SceneSpec(seed=0, height=16, width=16, channels=2, num_classes=3, n_objects=2)


def test_spec_validation():
    with pytest.raises(ConfigError):
        SceneSpec(seed=-1)
    with pytest.raises(ConfigError):
        SceneSpec(height=0)
    with pytest.raises(ConfigError):
        SceneSpec(teacher_noise=-0.1)
    with pytest.raises(ConfigError):
        SceneSpec(min_object_size=5.0, max_object_size=4.0)


def test_unplaceable_objects_error():
    with pytest.raises(ScenePlacementError):
        generate_scene(SceneSpec(height=6, width=6, max_object_size=10.0))


def test_empty_scene_has_no_gt_and_noise_features():
    spec = SceneSpec(seed=1, n_objects=0, height=8, width=8, channels=2, num_classes=2)
    teacher, student, gt = generate_scene(spec)
    assert gt.empty
    assert teacher.feature.shape == (2, 8, 8)
    assert teacher.feature.std() > 0.0  # pure noise, not all-zero


def test_same_seed_is_bitwise_identical():
    a_t, a_s, a_gt = generate_scene(SMALL)
    b_t, b_s, b_gt = generate_scene(SMALL)
    for a, b in ((a_t, b_t), (a_s, b_s)):
        assert a.feature.tobytes() == b.feature.tobytes()
        assert a.class_scores.tobytes() == b.class_scores.tobytes()
        assert a.pred_boxes.tobytes() == b.pred_boxes.tobytes()
    assert a_gt == b_gt


def test_different_seeds_differ():
    a_t, _, _ = generate_scene(SMALL)
    b_t, _, _ = generate_scene(SceneSpec(seed=123, height=16, width=16, channels=2, num_classes=3, n_objects=2))
    assert a_t.feature.tobytes() != b_t.feature.tobytes()


def test_scene_respects_spec_shapes_and_ranges():
    teacher, student, gt = generate_scene(SceneSpec(seed=2))
    assert teacher.feature.shape == (8, 32, 32)
    assert teacher.class_scores.shape == (32, 32, 4)
    assert teacher.pred_boxes.shape == (32, 32, 4)
    assert len(gt) == 3
    for box in gt.boxes:
        assert 0.0 <= box.x1 <= box.x2 <= 32.0
        assert 0.0 <= box.y1 <= box.y2 <= 32.0
        assert box.area > 0.0
    assert float(teacher.class_scores.min()) >= 0.0
    assert float(teacher.class_scores.max()) <= 1.0
    # predictions come out corner-ordered
    assert (teacher.pred_boxes[..., 0] <= teacher.pred_boxes[..., 2]).all()
    assert (student.pred_boxes[..., 1] <= student.pred_boxes[..., 3]).all()


def test_teacher_beats_student_iou_over_100_seeds():
    teacher_wins = 0
    for seed in range(100):
        spec = SceneSpec(seed=seed, height=16, width=16, channels=2, num_classes=3, n_objects=2)
        teacher, student, gt = generate_scene(spec)
        if max_iou_map(teacher.pred_boxes, gt).mean() > max_iou_map(student.pred_boxes, gt).mean():
            teacher_wins += 1
    assert teacher_wins >= 95  # construction makes this overwhelmingly likely


def test_zero_student_noise_clones_the_teacher():
    spec = SceneSpec(seed=3, student_noise=0.0, height=12, width=12, channels=2, num_classes=2, n_objects=1)
    teacher, student, _ = generate_scene(spec)
    assert teacher.feature.tobytes() == student.feature.tobytes()
    assert teacher.pred_boxes.tobytes() == student.pred_boxes.tobytes()
    assert teacher.class_scores.tobytes() == student.class_scores.tobytes()


# ----------------------------------------------------------------- pipeline

def _pipe(mode, spec=SMALL):
    teacher, student, gt = generate_scene(spec)
    return compute_pipeline(teacher, student, gt, DIEM, LDAM, SFDM, mode)


def test_full_mask_nonnegative():
    pipe = _pipe(AblationMode.FULL)
    assert (pipe.mask >= 0.0).all()


def test_cls_only_and_reg_only_force_score_components():
    cls_pipe = _pipe(AblationMode.CLS_ONLY)
    np.testing.assert_array_equal(cls_pipe.score_t.score_r, np.ones((16, 16)))
    reg_pipe = _pipe(AblationMode.REG_ONLY)
    np.testing.assert_array_equal(reg_pipe.score_t.score_c, np.ones((16, 16)))


def test_cls_reg_masks_differ_from_full():
    full = _pipe(AblationMode.FULL)
    for mode in (AblationMode.CLS_ONLY, AblationMode.REG_ONLY):
        other = _pipe(mode)
        assert (other.mask != full.mask).any()


def test_raw_iou_uses_scaled_iou():
    teacher, student, gt = generate_scene(SMALL)
    pipe = compute_pipeline(teacher, student, gt, DIEM, LDAM, SFDM, AblationMode.RAW_IOU)
    expected = 2.0 * max_iou_map(teacher.pred_boxes, gt)
    np.testing.assert_array_equal(pipe.score_t.score_r, expected)


def test_key_weak_components_recompose_full_output_value():
    full = _pipe(AblationMode.FULL)
    key_only = _pipe(AblationMode.KEY_ONLY)
    weak_only = _pipe(AblationMode.WEAK_ONLY)
    np.testing.assert_array_equal(
        full.output_map.v_output,
        key_only.output_map.score_key * weak_only.output_map.score_weak,
    )


def test_key_only_weak_only_forcing():
    key_only = _pipe(AblationMode.KEY_ONLY)
    np.testing.assert_array_equal(key_only.output_map.score_weak, np.ones((16, 16)))
    assert key_only.output_map.weak_points == ()
    weak_only = _pipe(AblationMode.WEAK_ONLY)
    np.testing.assert_array_equal(
        weak_only.output_map.score_key, np.full((16, 16), LDAM.key_base)
    )


def test_baseline_mask_is_two_level():
    pipe = _pipe(AblationMode.BASELINE_BG_OBJ)
    assert set(np.unique(pipe.mask)) <= {SFDM.alpha_bg, SFDM.alpha_obj}


def test_unmasked_mask_is_all_ones():
    pipe = _pipe(AblationMode.UNMASKED)
    np.testing.assert_array_equal(pipe.mask, np.ones((16, 16)))


# --------------------------------------------------------------- simulation

def test_simulation_fixed_point_when_student_equals_teacher():
    spec = SceneSpec(seed=5, student_noise=0.0, height=12, width=12, channels=2, num_classes=2, n_objects=1)
    report = run_simulation(spec, AblationMode.FULL, steps=10)
    assert report.loss_curve == [0.0] * 11


def test_simulation_curve_lengths_and_finiteness():
    report = run_simulation(SMALL, AblationMode.FULL, steps=25)
    assert len(report.loss_curve) == 26
    for curve in report.residual_curves.values():
        assert len(curve) == 26
    assert np.isfinite(report.loss_curve).all()
    assert report.tier_populations["high"] + report.tier_populations["med"] + report.tier_populations["low"] == 16 * 16


def test_simulation_monotone_and_converges_at_safe_step():
    report = run_simulation(SceneSpec(seed=6), AblationMode.FULL, steps=500)
    curve = np.array(report.loss_curve)
    assert (np.diff(curve) <= 0.0).all()
    assert curve[-1] <= 0.01 * curve[0]


def test_simulation_default_step_is_safe_step():
    teacher, student, gt = generate_scene(SMALL)
    pipe = compute_pipeline(teacher, student, gt, DIEM, LDAM, SFDM, AblationMode.FULL)
    expected = safe_step_size(pipe.mask, teacher.feature.size)
    report = run_simulation(SMALL, AblationMode.FULL, steps=2)
    assert report.step_size == expected


def test_simulation_deterministic_bitwise():
    a = run_simulation(SMALL, AblationMode.FULL, steps=30)
    b = run_simulation(SMALL, AblationMode.FULL, steps=30)
    assert a.loss_curve == b.loss_curve
    assert a.residual_curves == b.residual_curves
    assert a.mask.tobytes() == b.mask.tobytes()
    assert a.to_dict() == b.to_dict()


def test_full_beats_unmasked_on_high_tier_at_equal_budget():
    full = run_simulation(SMALL, AblationMode.FULL, steps=200)
    unmasked = run_simulation(
        SMALL, AblationMode.UNMASKED, steps=200, step_size=full.step_size
    )
    assert full.residual_curves["high"][-1] <= unmasked.residual_curves["high"][-1]


def test_simulation_rejects_bad_arguments():
    with pytest.raises(ConfigError):
        run_simulation(SMALL, AblationMode.FULL, steps=0)
    with pytest.raises(ConfigError):
        run_simulation(SMALL, AblationMode.FULL, steps=5, step_size=0.0)


def test_oversized_step_diverges_with_step_report():
    from tid.harness import SimulationDivergedError

    huge = 1e18
    with pytest.raises(SimulationDivergedError), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # the expected overflow
        run_simulation(SMALL, AblationMode.FULL, steps=400, step_size=huge)


def test_safe_step_size_zero_mask():
    assert safe_step_size(np.zeros((4, 4)), 64) == 1.0
