"""Command-line surface for the engine.

Subcommands map one-to-one onto pipeline stages:

    tid scene     write a seeded synthetic scene (bundles + ground truth)
    tid score     per-point task-importance scores for teacher and student
    tid mask      value maps and the tiered distillation mask
    tid loss      masked feature loss (and optionally its gradient)
    tid simulate  gradient-descent simulation, report JSON (+ heatmaps)
    tid heatmap   render a 2-D tensor as a binary PGM or CSV

Every command is a pure function of its input files and flags: identical
invocations produce byte-identical outputs. Configuration comes from a
flat JSON file (--config) whose keys mirror the flag names; individual
flags override file values.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .diem import DiemConfig, score_model
from .errors import ConfigError, TidError
from .geometry import load_ground_truth, save_ground_truth
from .harness import (
    AblationMode,
    SceneSpec,
    compute_pipeline,
    generate_scene,
    run_simulation,
)
from .ldam import LdamConfig
from .sfdm import SfdmConfig, Tier, align, distill_loss
from .tensorio import _atomic_write_bytes, load_bundle, read_tensor, save_bundle, write_tensor

_INT_KEYS = {"nms_radius", "seed", "height", "width", "channels", "num_classes", "n_objects"}

_SECTION_TYPES = {
    "diem": DiemConfig,
    "ldam": LdamConfig,
    "sfdm": SfdmConfig,
    "scene": SceneSpec,
}

_KEY_TO_SECTION = {
    f.name: section
    for section, cls in _SECTION_TYPES.items()
    for f in dataclasses.fields(cls)
}


@dataclass(frozen=True)
class CliConfig:
    """Validated merge of all module configurations."""

    diem: DiemConfig
    ldam: LdamConfig
    sfdm: SfdmConfig
    scene: SceneSpec

    @classmethod
    def load(cls, config_path=None, overrides: dict | None = None) -> "CliConfig":
        """Build from a flat JSON config file plus flag overrides."""
        flat: dict = {}
        if config_path is not None:
            raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
            if not isinstance(raw, dict):
                raise ConfigError(f"{config_path}: config must be a JSON object")
            flat.update(raw)
        flat.update(overrides or {})
        grouped: dict[str, dict] = {name: {} for name in _SECTION_TYPES}
        for key, value in flat.items():
            section = _KEY_TO_SECTION.get(key)
            if section is None:
                raise ConfigError(f"unknown configuration key: {key!r}")
            grouped[section][key] = int(value) if key in _INT_KEYS else float(value)
        return cls(
            diem=DiemConfig(**grouped["diem"]),
            ldam=LdamConfig(**grouped["ldam"]),
            sfdm=SfdmConfig(**grouped["sfdm"]),
            scene=SceneSpec(**grouped["scene"]),
        )

    def to_flat_dict(self) -> dict:
        merged: dict = {}
        for section in ("scene", "diem", "ldam", "sfdm"):
            merged.update(dataclasses.asdict(getattr(self, section)))
        return merged


def _write_json(path, obj) -> None:
    blob = json.dumps(obj, indent=2, sort_keys=True).encode("utf-8") + b"\n"
    _atomic_write_bytes(path, blob)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config_from_args(args) -> CliConfig:
    overrides = {}
    for key in ("cls_top_fraction", "gamma_key", "gamma_weak", "thrd_pos", "thrd_neg", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return CliConfig.load(getattr(args, "config", None), overrides)


def _load_inputs(args) -> tuple:
    teacher = load_bundle(args.teacher)
    student = load_bundle(args.student)
    gt_path = Path(args.gt)
    if not gt_path.is_file():
        raise TidError(f"{gt_path}: ground-truth file not found")
    return teacher, student, load_ground_truth(gt_path)


def _score_histogram(values: np.ndarray) -> dict[str, int]:
    uniq, counts = np.unique(np.asarray(values), return_counts=True)
    return {format(float(v), ".6g"): int(c) for v, c in zip(uniq, counts)}


def cmd_scene(args) -> int:
    cfg = _config_from_args(args)
    out = _out_dir(args)
    teacher, student, gt = generate_scene(cfg.scene)
    save_bundle(out / "teacher_bundle.json", teacher, prefix="teacher_")
    save_bundle(out / "student_bundle.json", student, prefix="student_")
    save_ground_truth(out / "gt.json", gt)
    print(f"scene seed={cfg.scene.seed} objects={len(gt)} written to {out}")
    return 0


def cmd_score(args) -> int:
    cfg = _config_from_args(args)
    teacher, student, gt = _load_inputs(args)
    out = _out_dir(args)
    summary = {"grid": [teacher.height, teacher.width]}
    for name, bundle in (("teacher", teacher), ("student", student)):
        maps = score_model(bundle, gt, cfg.diem)
        write_tensor(out / f"{name}_score_r.tidt", maps.score_r)
        write_tensor(out / f"{name}_score_c.tidt", maps.score_c)
        write_tensor(out / f"{name}_score.tidt", maps.score)
        summary[name] = {
            "cls_hit_count": int((maps.score_c == cfg.diem.cls_hit).sum()),
            "score_r_histogram": _score_histogram(maps.score_r),
            "score_histogram": _score_histogram(maps.score),
        }
    _write_json(out / "summary.json", summary)
    print(f"score maps written to {out}")
    return 0


def cmd_mask(args) -> int:
    cfg = _config_from_args(args)
    teacher, student, gt = _load_inputs(args)
    out = _out_dir(args)
    pipe = compute_pipeline(
        teacher, student, gt, cfg.diem, cfg.ldam, cfg.sfdm, AblationMode.FULL
    )
    vm = pipe.value_maps
    write_tensor(out / "v_output.tidt", vm.v_output)
    write_tensor(out / "v_info.tidt", vm.v_info)
    write_tensor(out / "v.tidt", vm.v)
    write_tensor(out / "mask.tidt", vm.mask)
    write_tensor(out / "tier_labels.tidt", vm.tier_labels.astype(np.float32))
    populations = {
        "high": int((vm.tier_labels == int(Tier.HIGH)).sum()),
        "med": int((vm.tier_labels == int(Tier.MED)).sum()),
        "low": int((vm.tier_labels == int(Tier.LOW)).sum()),
    }
    summary = {
        "tier_populations": populations,
        "total_points": int(vm.v.size),
        "weak_point_count": len(pipe.output_map.weak_points),
    }
    _write_json(out / "summary.json", summary)
    print(f"value maps written to {out}")
    return 0


def _read_tier_labels(path, shape) -> np.ndarray:
    raw = read_tensor(path)
    labels = np.rint(raw).astype(np.int8)
    if labels.shape != shape:
        raise TidError(f"{path}: tier labels shape {labels.shape} != grid {shape}")
    if not np.isin(labels, [int(t) for t in Tier]).all():
        raise TidError(f"{path}: tier labels must be in {{0, 1, 2}}")
    return labels


def cmd_loss(args) -> int:
    teacher = read_tensor(args.teacher)
    student = read_tensor(args.student)
    mask = read_tensor(args.mask)
    if teacher.ndim != 3 or mask.ndim != 2:
        raise TidError(
            f"expected (C, H, W) features and (H, W) mask, got {teacher.shape} / {mask.shape}"
        )
    projection = read_tensor(args.projection) if args.projection else None
    student = align(student, teacher.shape, projection)
    if args.tier_labels:
        labels = _read_tier_labels(args.tier_labels, mask.shape)
    else:
        labels = np.full(mask.shape, int(Tier.HIGH), dtype=np.int8)
    report = distill_loss(teacher, student, mask, labels)
    payload = {
        "total": report.total,
        "per_tier": {
            "high": report.per_tier[Tier.HIGH],
            "med": report.per_tier[Tier.MED],
            "low": report.per_tier[Tier.LOW],
        },
        "elements": int(np.asarray(teacher).size),
        "grad_path": None,
    }
    if args.emit_grad:
        out = _out_dir(args)
        grad_path = out / "grad.tidt"
        write_tensor(grad_path, report.grad_student)
        payload["grad_path"] = str(grad_path)
    print(json.dumps(payload, sort_keys=True))
    return 0


def _render_pgm(arr: np.ndarray) -> bytes:
    """Binary P5 graymap, min-max normalized; constant maps render black."""
    lo = float(arr.min())
    hi = float(arr.max())
    if hi > lo:
        pixels = np.rint((arr - lo) * (255.0 / (hi - lo))).astype(np.uint8)
    else:
        pixels = np.zeros(arr.shape, dtype=np.uint8)
    h, w = arr.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def _render_csv(arr: np.ndarray) -> bytes:
    lines = [",".join(repr(float(v)) for v in row) for row in arr]
    return ("\n".join(lines) + "\n").encode("ascii")


def _write_heatmap(tensor: np.ndarray, out_path, fmt: str) -> None:
    arr = np.asarray(tensor, dtype=np.float64)
    if arr.ndim != 2:
        raise TidError(f"heatmaps need a 2-D tensor, got shape {arr.shape}")
    blob = _render_pgm(arr) if fmt == "pgm" else _render_csv(arr)
    _atomic_write_bytes(out_path, blob)


def cmd_heatmap(args) -> int:
    _write_heatmap(read_tensor(args.tensor), args.output, args.format)
    print(f"{args.format} heatmap written to {args.output}")
    return 0


def cmd_simulate(args) -> int:
    cfg = _config_from_args(args)
    try:
        mode = AblationMode(args.mode)
    except ValueError:
        raise ConfigError(
            f"unknown mode {args.mode!r}; choose from "
            f"{', '.join(m.value for m in AblationMode)}"
        ) from None
    report = run_simulation(
        cfg.scene,
        mode,
        steps=args.steps,
        step_size=args.step_size,
        diem_cfg=cfg.diem,
        ldam_cfg=cfg.ldam,
        sfdm_cfg=cfg.sfdm,
    )
    out = _out_dir(args)
    _write_json(out / "report.json", report.to_dict())
    if args.heatmap:
        _write_heatmap(report.value_map, out / "value_map.pgm", "pgm")
        _write_heatmap(report.mask, out / "mask.pgm", "pgm")
    print(
        f"mode={mode.value} steps={report.steps} step_size={report.step_size:.6g} "
        f"loss {report.loss_curve[0]:.6g} -> {report.loss_curve[-1]:.6g}"
    )
    return 0


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="flat JSON config file")
    parser.add_argument("--cls-top-fraction", dest="cls_top_fraction", type=float)
    parser.add_argument("--gamma-key", dest="gamma_key", type=float)
    parser.add_argument("--gamma-weak", dest="gamma_weak", type=float)
    parser.add_argument("--thrd-pos", dest="thrd_pos", type=float)
    parser.add_argument("--thrd-neg", dest="thrd_neg", type=float)
    parser.add_argument("--seed", type=int)


def _add_bundle_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--teacher", required=True, help="teacher bundle JSON")
    parser.add_argument("--student", required=True, help="student bundle JSON")
    parser.add_argument("--gt", required=True, help="ground-truth JSON")
    parser.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tid", description="task-integration distillation engine"
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scene", help="generate a synthetic scene")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scene)

    p = sub.add_parser("score", help="task-importance score maps")
    _add_config_flags(p)
    _add_bundle_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("mask", help="value maps and tiered mask")
    _add_config_flags(p)
    _add_bundle_flags(p)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("loss", help="masked feature loss and gradient")
    p.add_argument("--teacher", required=True, help="teacher feature tensor")
    p.add_argument("--student", required=True, help="student feature tensor")
    p.add_argument("--mask", required=True, help="mask tensor (H, W)")
    p.add_argument("--tier-labels", dest="tier_labels", help="tier label tensor")
    p.add_argument("--projection", help="channel projection tensor (C, C_s)")
    p.add_argument("--emit-grad", dest="emit_grad", action="store_true")
    p.add_argument("--out", default=".", help="directory for --emit-grad output")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("simulate", help="gradient-descent simulation")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default=AblationMode.FULL.value)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--step-size", dest="step_size", type=float, default=None,
                   help="absolute descent step (default: safe step for the mask)")
    p.add_argument("--heatmap", action="store_true", help="also write PGM heatmaps")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("heatmap", help="render a 2-D tensor")
    p.add_argument("tensor", help="input tensor file")
    p.add_argument("output", help="output file")
    p.add_argument("--format", choices=("pgm", "csv"), default="pgm")
    p.set_defaults(func=cmd_heatmap)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (TidError, OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
