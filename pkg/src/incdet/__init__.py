"""Class-incremental object detection without base/novel co-occurrence.

A base teacher and a novel teacher, trained on disjoint labelled sets, pick
confident and transformation-consistent images out of an unlabelled wild
pool; a student over all classes is then distilled from both.
"""

from importlib import resources
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .core import Box, ClassPartition, Detection, ImageTransform, iou, nms
from .data import Dataset, SyntheticConfig, audit_cooccurrence, build_incremental_splits, generate_synthetic, load_annotations
from .detector import Detector, DetectorConfig, detect
from .distill import DistillHyper, NumericalError
from .metrics import average_precision, coco_map, report_base_novel_all, voc_map
from .sampler import SamplerConfig, blind_sample
from .train import ExperimentPlan, TrainConfig, distill_student, run_plan, train_detector

__version__ = "0.1.0"


def preset_path(name: str) -> Path:
    """Path of a shipped plan, e.g. ``preset_path("desk_3p1")``."""
    p = resources.files(__package__) / "presets" / f"{name}.json"
    if not p.is_file():
        raise FileNotFoundError(f"no preset named {name!r}")
    return Path(str(p))


__all__ = [
    "Box",
    "ClassPartition",
    "Dataset",
    "Detection",
    "Detector",
    "DetectorConfig",
    "DistillHyper",
    "ExperimentPlan",
    "ImageTransform",
    "NumericalError",
    "SamplerConfig",
    "SyntheticConfig",
    "TrainConfig",
    "audit_cooccurrence",
    "average_precision",
    "blind_sample",
    "build_incremental_splits",
    "coco_map",
    "detect",
    "distill_student",
    "generate_synthetic",
    "iou",
    "load_annotations",
    "load_checkpoint",
    "nms",
    "preset_path",
    "report_base_novel_all",
    "run_plan",
    "save_checkpoint",
    "train_detector",
    "voc_map",
]
