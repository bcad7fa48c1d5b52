"""Task-integration distillation engine.

Scores detector outputs on both sub-tasks, assesses the student's
learning condition against the teacher, decouples the feature grid into
tiered value masks, and evaluates the masked feature-imitation loss with
analytic gradients. See the CLI (``tid --help``) for the file-level
workflow.
"""

__version__ = "0.1.0"

from .diem import DiemConfig, ScoreMaps, score_model
from .errors import ConfigError, ShapeMismatchError, TidError
from .geometry import BBox, GroundTruth, greedy_suppress, iou, max_iou_map
from .harness import AblationMode, SceneSpec, SimulationReport, generate_scene, run_simulation
from .ldam import LdamConfig, OutputValueMap, output_value_map
from .sfdm import LossReport, SfdmConfig, Tier, ValueMaps, build_value_maps, distill_loss
from .tensorio import LevelBundle, load_bundle, read_tensor, save_bundle, write_tensor

__all__ = [
    "__version__",
    "AblationMode",
    "BBox",
    "ConfigError",
    "DiemConfig",
    "GroundTruth",
    "LdamConfig",
    "LevelBundle",
    "LossReport",
    "OutputValueMap",
    "SceneSpec",
    "ScoreMaps",
    "SfdmConfig",
    "ShapeMismatchError",
    "SimulationReport",
    "TidError",
    "Tier",
    "ValueMaps",
    "build_value_maps",
    "distill_loss",
    "generate_scene",
    "greedy_suppress",
    "iou",
    "load_bundle",
    "max_iou_map",
    "output_value_map",
    "read_tensor",
    "run_simulation",
    "save_bundle",
    "score_model",
    "write_tensor",
]
