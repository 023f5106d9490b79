"""Run-directory orchestration shared by the command line: train, evaluate, predict.

Run directory layout::

    RUN_DIR/config.json     training + model configuration
    RUN_DIR/epochs.jsonl    one EpochLog per line
    RUN_DIR/best/           checkpoint (model.bin, config.json, norm_stats.json)
    RUN_DIR/split.json      patient split used
    RUN_DIR/run.json        input provenance (manifest, features, pixel scale)
"""
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from .data import Manifest, SplitManifest, filter_supervised, save_split
from .estimator import SDFClassifier
from .metrics import EvalReport, emit_plots, evaluate_predictions
from .models import ModelConfig, Variant
from .morphometry import CalibrationConfig, FeatureTable, SegmentationError, measure, read_image
from .training import SampleSet, TrainConfig, load_crop, load_samples, read_epoch_logs

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".tif", ".tiff", ".jpg", ".jpeg", ".bmp"}


def load_run_config(path) -> tuple[ModelConfig | None, TrainConfig]:
    """Read a ``{"model": {...}, "train": {...}}`` JSON file; either part may be omitted."""
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    unknown = set(obj) - {"model", "train"}
    if unknown:
        raise ValueError(f"{path}: unknown top-level keys {sorted(unknown)}; expected 'model' and/or 'train'")
    model = ModelConfig.from_json(obj["model"]) if "model" in obj else None
    return model, TrainConfig.from_json(obj.get("train", {}))


def _inputs(samples: SampleSet) -> dict:
    return {"images": samples.images, "features": samples.features}


def _estimator(model_cfg: ModelConfig, train_cfg: TrainConfig) -> SDFClassifier:
    return SDFClassifier(
        variant=model_cfg.variant.value, backbone_id=model_cfg.backbone_id, pretrained=model_cfg.pretrained,
        head_widths=model_cfg.head_widths, head_dropout=model_cfg.head_dropout,
        base_lr=train_cfg.base_lr, layer_decay=train_cfg.layer_decay,
        warmup_proportion=train_cfg.warmup_proportion, patience=train_cfg.patience,
        max_epochs=train_cfg.max_epochs, batch_size=train_cfg.batch_size, augment=train_cfg.augment,
        random_state=train_cfg.seed,
    )


def split_samples(manifest: Manifest, split: SplitManifest, model_cfg: ModelConfig,
                  features: FeatureTable | None) -> tuple[SampleSet, SampleSet]:
    supervised = filter_supervised(manifest)
    train_m, val_m = split.materialize(supervised)
    kw = dict(features=features if model_cfg.variant.uses_features else None,
              image_size=model_cfg.image_size)
    return load_samples(train_m, model_cfg.variant, **kw), load_samples(val_m, model_cfg.variant, **kw)


def train_run(manifest: Manifest, split: SplitManifest, features: FeatureTable | None,
              model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir, *,
              manifest_path=None, features_path=None) -> SDFClassifier:
    """Fit one variant on the split's training patients and populate ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, val = split_samples(manifest, split, model_cfg, features)
    logger.info("training %s on %d cells (%d patients), validating on %d cells (%d patients)",
                model_cfg.variant.value, len(train), len(set(train.patient_ids)), len(val),
                len(set(val.patient_ids)))
    est = _estimator(model_cfg, train_cfg)
    est.fit(_inputs(train), train.labels, groups=train.patient_ids,
            eval_set=(_inputs(val), val.labels), eval_groups=val.patient_ids, run_dir=out)
    est.save(out / "best")
    save_split(split, out / "split.json")
    provenance = {
        "manifest": None if manifest_path is None else str(Path(manifest_path).resolve()),
        "features": None if features_path is None else str(Path(features_path).resolve()),
        "pixel_scale_um": manifest.pixel_scale_um,
        "primary_round": manifest.primary_round,
        "variant": model_cfg.variant.value,
        "best_epoch": est.best_epoch_,
        "best_val_loss": est.best_val_loss_,
    }
    (out / "run.json").write_text(json.dumps(provenance, indent=2) + "\n", encoding="utf-8")
    return est


def read_provenance(run_dir) -> dict:
    path = Path(run_dir) / "run.json"
    return json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}


def write_predictions(path, cell_ids, probabilities, threshold: float = 0.5) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["cell_id", "probability", "predicted_label"])
        for cid, p in zip(cell_ids, probabilities):
            writer.writerow([cid, f"{p:.6f}", int(p >= threshold)])
    return path


def evaluate_run(run_dir, manifest: Manifest, split: SplitManifest, out_dir,
                 features: FeatureTable | None = None, threshold: float = 0.5) -> EvalReport:
    """Score the run's best checkpoint on the validation patients and write report + plots."""
    run_dir = Path(run_dir)
    est = SDFClassifier.load(run_dir / "best")
    model_cfg = est.model_.cfg
    if model_cfg.variant.uses_features and features is None:
        feat_path = read_provenance(run_dir).get("features")
        if not feat_path:
            raise ValueError("this variant needs morphometry; pass the feature table")
        features = FeatureTable.read_csv(feat_path)
    _, val = split_samples(manifest, split, model_cfg, features)
    if len(val) == 0:
        raise ValueError("no supervised validation cells in the split")
    prob = est.predict_proba(_inputs(val))[:, 1]
    rep = evaluate_predictions(val.labels.astype(int), prob, threshold=threshold)
    epochs = run_dir / "epochs.jsonl"
    logs = read_epoch_logs(epochs) if epochs.exists() else []
    out = Path(out_dir)
    emit_plots(rep, logs, out, title=model_cfg.variant.value.capitalize() + " Model")
    write_predictions(out / "predictions.csv", val.cell_ids, prob, threshold)
    return rep


def predict_images(run_dir, images_dir, out_csv, threshold: float = 0.5,
                   pixel_scale_um: float | None = None) -> Path:
    """Per-image probabilities for every crop in ``images_dir`` (cell id = file stem)."""
    run_dir = Path(run_dir)
    est = SDFClassifier.load(run_dir / "best")
    cfg = est.model_.cfg
    paths = sorted(p for p in Path(images_dir).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise FileNotFoundError(f"no images found in {images_dir}")
    images = features = None
    if cfg.variant.uses_images:
        images = np.stack([load_crop(p, cfg.image_size) for p in paths])
    if cfg.variant.uses_features:
        scale = pixel_scale_um or read_provenance(run_dir).get("pixel_scale_um") or 1.0
        calib = CalibrationConfig(pixel_scale_um=scale)
        features = np.full((len(paths), 7), np.nan)
        for i, p in enumerate(paths):
            try:
                features[i] = measure(read_image(p), calib).as_array()
            except SegmentationError as exc:
                logger.warning("%s: %s", p.name, exc)
    prob = est.predict_proba({"images": images, "features": features})[:, 1]
    return write_predictions(out_csv, [p.stem for p in paths], prob, threshold)
