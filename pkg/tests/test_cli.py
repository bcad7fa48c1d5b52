import json
import math
import subprocess
import sys

import numpy as np
import pytest

from tid.cli import CliConfig, main
from tid.diem import DiemConfig
from tid.errors import ConfigError
from tid.geometry import load_ground_truth
from tid.harness import AblationMode, SceneSpec, compute_pipeline, generate_scene
from tid.ldam import LdamConfig
from tid.sfdm import SfdmConfig, Tier, distill_loss
from tid.tensorio import load_bundle, read_tensor, write_tensor

SCENE_FLAGS = [
    "--seed", "0",
]

SMALL_CONFIG = {
    "height": 16,
    "width": 16,
    "channels": 2,
    "num_classes": 3,
    "n_objects": 2,
}


def run_cli(*argv):
    """Invoke the CLI in-process, capturing the exit code."""
    return main(list(argv))


def _write_config(tmp_path, extra=None):
    cfg = dict(SMALL_CONFIG)
    cfg.update(extra or {})
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def _make_scene(tmp_path, seed=0):
    cfg = _write_config(tmp_path)
    out = tmp_path / "scene"
    assert run_cli("scene", "--config", cfg, "--seed", str(seed), "--out", str(out)) == 0
    return cfg, out


# ------------------------------------------------------------------- config

def test_config_merges_file_and_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"thrd_pos": 0.6, "gamma_key": 0.2, "seed": 5}))
    cfg = CliConfig.load(path, {"gamma_key": 0.3})
    assert cfg.diem.thrd_pos == 0.6
    assert cfg.ldam.gamma_key == 0.3
    assert cfg.scene.seed == 5


def test_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"no_such_knob": 1}))
    with pytest.raises(ConfigError):
        CliConfig.load(path)


def test_config_validates_before_running(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"thrd_pos": 0.3, "thrd_neg": 0.4}))
    assert run_cli("simulate", "--config", str(path), "--out", str(tmp_path / "o")) == 1


def test_flat_dict_roundtrip():
    cfg = CliConfig.load(None, {"gamma_weak": 0.25})
    flat = cfg.to_flat_dict()
    assert flat["gamma_weak"] == 0.25
    again = CliConfig.load(None, flat)
    assert again == cfg


# -------------------------------------------------------------------- scene

def test_scene_command_writes_loadable_bundles(tmp_path):
    _, out = _make_scene(tmp_path)
    teacher = load_bundle(out / "teacher_bundle.json")
    student = load_bundle(out / "student_bundle.json")
    gt = load_ground_truth(out / "gt.json")
    assert teacher.height == 16 and student.width == 16
    assert len(gt) == 2
    # files mirror the in-process generator bitwise
    t_mem, s_mem, gt_mem = generate_scene(SceneSpec(seed=0, **SMALL_CONFIG))
    assert teacher.feature.tobytes() == t_mem.feature.tobytes()
    assert student.pred_boxes.tobytes() == s_mem.pred_boxes.tobytes()
    assert gt == gt_mem


# -------------------------------------------------------------------- score

def test_score_command_outputs_satisfy_invariants(tmp_path):
    cfg, scene = _make_scene(tmp_path)
    out = tmp_path / "scores"
    assert run_cli(
        "score", "--config", cfg,
        "--teacher", str(scene / "teacher_bundle.json"),
        "--student", str(scene / "student_bundle.json"),
        "--gt", str(scene / "gt.json"),
        "--out", str(out),
    ) == 0
    dcfg = DiemConfig()
    for model in ("teacher", "student"):
        score_r = read_tensor(out / f"{model}_score_r.tidt")
        score_c = read_tensor(out / f"{model}_score_c.tidt")
        score = read_tensor(out / f"{model}_score.tidt")
        assert set(np.unique(score_r)) <= {
            np.float32(dcfg.score_pos), np.float32(dcfg.score_mid), np.float32(dcfg.score_neg)
        }
        assert set(np.unique(score_c)) <= {np.float32(dcfg.cls_hit), np.float32(dcfg.cls_miss)}
        np.testing.assert_allclose(
            score, score_r.astype(np.float64) * score_c.astype(np.float64), rtol=1e-6
        )
    summary = json.loads((out / "summary.json").read_text())
    assert summary["teacher"]["cls_hit_count"] == math.ceil(0.025 * 16 * 16)


def test_score_command_full_fraction_hits_everywhere(tmp_path):
    cfg, scene = _make_scene(tmp_path)
    out = tmp_path / "scores_full"
    assert run_cli(
        "score", "--config", cfg, "--cls-top-fraction", "1.0",
        "--teacher", str(scene / "teacher_bundle.json"),
        "--student", str(scene / "student_bundle.json"),
        "--gt", str(scene / "gt.json"),
        "--out", str(out),
    ) == 0
    score_c = read_tensor(out / "teacher_score_c.tidt")
    np.testing.assert_array_equal(score_c, np.full((16, 16), 1.5, dtype=np.float32))


def test_score_command_missing_gt_fails_with_path(tmp_path, capsys):
    cfg, scene = _make_scene(tmp_path)
    missing = tmp_path / "nope.json"
    code = run_cli(
        "score", "--config", cfg,
        "--teacher", str(scene / "teacher_bundle.json"),
        "--student", str(scene / "student_bundle.json"),
        "--gt", str(missing),
        "--out", str(tmp_path / "x"),
    )
    assert code == 1
    assert "nope.json" in capsys.readouterr().err


# --------------------------------------------------------------------- mask

def test_mask_command_matches_manual_composition(tmp_path):
    cfg, scene = _make_scene(tmp_path)
    out = tmp_path / "masks"
    assert run_cli(
        "mask", "--config", cfg,
        "--teacher", str(scene / "teacher_bundle.json"),
        "--student", str(scene / "student_bundle.json"),
        "--gt", str(scene / "gt.json"),
        "--out", str(out),
    ) == 0
    teacher = load_bundle(scene / "teacher_bundle.json")
    student = load_bundle(scene / "student_bundle.json")
    gt = load_ground_truth(scene / "gt.json")
    pipe = compute_pipeline(
        teacher, student, gt, DiemConfig(), LdamConfig(), SfdmConfig(), AblationMode.FULL
    )
    for name, expected in (
        ("v_output", pipe.value_maps.v_output),
        ("v_info", pipe.value_maps.v_info),
        ("v", pipe.value_maps.v),
        ("mask", pipe.value_maps.mask),
    ):
        got = read_tensor(out / f"{name}.tidt")
        assert got.tobytes() == expected.astype(np.float32).tobytes()
    labels = read_tensor(out / "tier_labels.tidt")
    np.testing.assert_array_equal(labels, pipe.value_maps.tier_labels.astype(np.float32))
    summary = json.loads((out / "summary.json").read_text())
    pops = summary["tier_populations"]
    assert pops["high"] + pops["med"] + pops["low"] == 16 * 16


def test_mask_command_empty_gt_all_low(tmp_path):
    cfg = _write_config(tmp_path, {"n_objects": 0})
    scene = tmp_path / "scene0"
    assert run_cli("scene", "--config", cfg, "--out", str(scene)) == 0
    out = tmp_path / "mask0"
    with pytest.warns(UserWarning, match="no ground-truth"):
        assert run_cli(
            "mask", "--config", cfg,
            "--teacher", str(scene / "teacher_bundle.json"),
            "--student", str(scene / "student_bundle.json"),
            "--gt", str(scene / "gt.json"),
            "--out", str(out),
        ) == 0
    v_info = read_tensor(out / "v_info.tidt")
    np.testing.assert_array_equal(v_info, np.zeros((16, 16), dtype=np.float32))
    labels = read_tensor(out / "tier_labels.tidt")
    np.testing.assert_array_equal(labels, np.zeros((16, 16), dtype=np.float32))


# --------------------------------------------------------------------- loss

def test_loss_command_identical_features_zero(tmp_path, capsys):
    f = np.random.default_rng(0).standard_normal((2, 3, 3)).astype(np.float32)
    write_tensor(tmp_path / "t.tidt", f)
    write_tensor(tmp_path / "s.tidt", f)
    write_tensor(tmp_path / "m.tidt", np.ones((3, 3), dtype=np.float32))
    assert run_cli(
        "loss", "--teacher", str(tmp_path / "t.tidt"),
        "--student", str(tmp_path / "s.tidt"), "--mask", str(tmp_path / "m.tidt"),
    ) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["total"] == 0.0


def test_loss_command_single_element_oracle(tmp_path, capsys):
    write_tensor(tmp_path / "t.tidt", np.array([[[3.0]]], dtype=np.float32))
    write_tensor(tmp_path / "s.tidt", np.array([[[0.0]]], dtype=np.float32))
    write_tensor(tmp_path / "m.tidt", np.array([[2.0]], dtype=np.float32))
    assert run_cli(
        "loss", "--teacher", str(tmp_path / "t.tidt"),
        "--student", str(tmp_path / "s.tidt"), "--mask", str(tmp_path / "m.tidt"),
        "--emit-grad", "--out", str(tmp_path),
    ) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["total"] == 18.0
    grad = read_tensor(tmp_path / "grad.tidt")
    assert grad[0, 0, 0] == np.float32(-12.0)


def test_loss_command_emit_grad_matches_engine(tmp_path, capsys):
    rng = np.random.default_rng(1)
    t = rng.standard_normal((2, 4, 4)).astype(np.float32)
    s = rng.standard_normal((2, 4, 4)).astype(np.float32)
    m = rng.uniform(0, 2, (4, 4)).astype(np.float32)
    write_tensor(tmp_path / "t.tidt", t)
    write_tensor(tmp_path / "s.tidt", s)
    write_tensor(tmp_path / "m.tidt", m)
    assert run_cli(
        "loss", "--teacher", str(tmp_path / "t.tidt"),
        "--student", str(tmp_path / "s.tidt"), "--mask", str(tmp_path / "m.tidt"),
        "--emit-grad", "--out", str(tmp_path),
    ) == 0
    labels = np.full((4, 4), int(Tier.HIGH), dtype=np.int8)
    expected = distill_loss(t, s, m, labels)
    payload = json.loads(capsys.readouterr().out)
    assert payload["total"] == expected.total
    got = read_tensor(tmp_path / "grad.tidt")
    assert got.tobytes() == expected.grad_student.astype(np.float32).tobytes()


def test_loss_command_shape_mismatch_fails(tmp_path, capsys):
    write_tensor(tmp_path / "t.tidt", np.zeros((2, 3, 3), dtype=np.float32))
    write_tensor(tmp_path / "s.tidt", np.zeros((2, 3, 4), dtype=np.float32))
    write_tensor(tmp_path / "m.tidt", np.zeros((3, 3), dtype=np.float32))
    assert run_cli(
        "loss", "--teacher", str(tmp_path / "t.tidt"),
        "--student", str(tmp_path / "s.tidt"), "--mask", str(tmp_path / "m.tidt"),
    ) == 1
    assert "error" in capsys.readouterr().err


# ----------------------------------------------------------------- simulate

def test_simulate_writes_valid_report(tmp_path):
    cfg = _write_config(tmp_path)
    out = tmp_path / "sim"
    assert run_cli(
        "simulate", "--config", cfg, "--mode", "full", "--steps", "30",
        "--out", str(out),
    ) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["mode"] == "full"
    assert len(report["loss_curve"]) == 31
    assert set(report["residual_curves"]) == {"high", "med", "low"}
    assert set(report["tier_populations"]) == {"high", "med", "low"}
    assert report["config"]["height"] == 16
    assert np.isfinite(report["loss_curve"]).all()


def test_simulate_cls_vs_reg_masks_differ(tmp_path):
    cfg = _write_config(tmp_path)
    masks = {}
    for mode in ("cls_only", "reg_only"):
        out = tmp_path / mode
        assert run_cli(
            "simulate", "--config", cfg, "--mode", mode, "--steps", "5",
            "--out", str(out),
        ) == 0
        masks[mode] = json.loads((out / "report.json").read_text())["mask"]
    assert masks["cls_only"] != masks["reg_only"]


def test_simulate_deterministic_bytes(tmp_path):
    cfg = _write_config(tmp_path)
    blobs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run_cli(
            "simulate", "--config", cfg, "--seed", "11", "--steps", "20",
            "--out", str(out),
        ) == 0
        blobs.append((out / "report.json").read_bytes())
    assert blobs[0] == blobs[1]


def test_simulate_unknown_mode_fails(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    assert run_cli("simulate", "--config", cfg, "--mode", "bogus", "--out", str(tmp_path / "x")) == 1
    assert "unknown mode" in capsys.readouterr().err


def test_simulate_heatmap_emission(tmp_path):
    cfg = _write_config(tmp_path)
    out = tmp_path / "sim_hm"
    assert run_cli(
        "simulate", "--config", cfg, "--steps", "5", "--heatmap", "--out", str(out),
    ) == 0
    blob = (out / "value_map.pgm").read_bytes()
    assert blob.startswith(b"P5\n16 16\n255\n")
    assert len(blob) == len(b"P5\n16 16\n255\n") + 16 * 16


# ------------------------------------------------------------------ heatmap

def test_heatmap_pgm_normalization(tmp_path):
    write_tensor(tmp_path / "t.tidt", np.array([[0.0, 1.0], [2.0, 3.0]], dtype=np.float32))
    out = tmp_path / "map.pgm"
    assert run_cli("heatmap", str(tmp_path / "t.tidt"), str(out)) == 0
    blob = out.read_bytes()
    header = b"P5\n2 2\n255\n"
    assert blob[: len(header)] == header
    assert list(blob[len(header):]) == [0, 85, 170, 255]


def test_heatmap_constant_map_renders_black(tmp_path):
    write_tensor(tmp_path / "t.tidt", np.full((3, 3), 7.0, dtype=np.float32))
    out = tmp_path / "flat.pgm"
    assert run_cli("heatmap", str(tmp_path / "t.tidt"), str(out)) == 0
    payload = out.read_bytes().split(b"255\n", 1)[1]
    assert payload == b"\x00" * 9


def test_heatmap_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    values = rng.standard_normal((4, 5)).astype(np.float32)
    write_tensor(tmp_path / "t.tidt", values)
    out = tmp_path / "map.csv"
    assert run_cli("heatmap", str(tmp_path / "t.tidt"), str(out), "--format", "csv") == 0
    rows = [
        [float(cell) for cell in line.split(",")]
        for line in out.read_text().strip().split("\n")
    ]
    np.testing.assert_allclose(np.array(rows, dtype=np.float32), values, atol=1e-6)


def test_heatmap_rejects_non_2d(tmp_path, capsys):
    write_tensor(tmp_path / "t.tidt", np.zeros((2, 2, 2), dtype=np.float32))
    assert run_cli("heatmap", str(tmp_path / "t.tidt"), str(tmp_path / "o.pgm")) == 1
    assert "2-D" in capsys.readouterr().err


# ------------------------------------------------------------- subprocess

def test_cli_entrypoint_subprocess_roundtrip(tmp_path):
    cfg = _write_config(tmp_path)
    result = subprocess.run(
        [sys.executable, "-m", "tid", "scene", "--config", cfg, "--out", str(tmp_path / "s")],
        capture_output=True,
        text=True,
    )
    assert result.returncode == 0, result.stderr
    assert (tmp_path / "s" / "gt.json").is_file()


def test_cli_version_flag():
    result = subprocess.run(
        [sys.executable, "-m", "tid", "--version"], capture_output=True, text=True
    )
    assert result.returncode == 0
    assert result.stdout.strip() == "tid 0.1.0"
