"""Sperm DNA fragmentation classification from phase-contrast single-cell crops."""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    CellRecord,
    Label,
    Manifest,
    SplitManifest,
    class_counts,
    filter_supervised,
    grouped_split,
    load_manifest,
)
from .estimator import SDFClassifier  # noqa: E402
from .metrics import ConfusionMatrix, EvalReport, confusion, report, roc, wilson_ci, clopper_pearson_ci  # noqa: E402
from .models import ModelConfig, Variant, build_model, parameter_groups  # noqa: E402
from .morphometry import CalibrationConfig, FeatureNormalizer, MorphologyExtractor, MorphologyFeatures  # noqa: E402
from .training import TrainConfig, bce_loss, fit, lr_at  # noqa: E402

__all__ = [
    "CalibrationConfig", "CellRecord", "ConfusionMatrix", "EvalReport", "FeatureNormalizer", "Label",
    "Manifest", "ModelConfig", "MorphologyExtractor", "MorphologyFeatures", "SDFClassifier",
    "SplitManifest", "TrainConfig", "Variant", "bce_loss", "build_model", "class_counts",
    "clopper_pearson_ci", "confusion", "filter_supervised", "fit", "grouped_split", "load_manifest",
    "lr_at", "parameter_groups", "report", "roc", "wilson_ci",
]
