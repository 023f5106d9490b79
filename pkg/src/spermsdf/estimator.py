"""scikit-learn compatible classifier over the three model variants."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.model_selection import GroupShuffleSplit
from sklearn.utils.validation import check_is_fitted

from .models import ModelConfig, Variant, build_model, load_checkpoint, save_checkpoint
from .morphometry import N_FEATURES, compute_norm_stats
from .training import SampleSet, TrainConfig, evaluate_loss, fit, prepare_features


def _as_images(images, size: int) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError(f"images must be (n, height, width), got shape {arr.shape}")
    if arr.size and arr.max() > 1.0:
        arr = arr / 255.0
    if arr.shape[1:] != (size, size):
        t = torch.from_numpy(arr).unsqueeze(1)
        arr = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False).squeeze(1).numpy()
    return np.ascontiguousarray(arr)


def _as_features(features) -> np.ndarray:
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != N_FEATURES:
        raise ValueError(f"features must be (n, {N_FEATURES}), got shape {arr.shape}")
    return arr


def split_inputs(X, variant: Variant):
    """Unpack ``X`` into ``(images, features)`` for ``variant``.

    ``X`` is an ``(n, 7)`` morphometry matrix for the morphology variant, an
    ``(n, H, W)`` image stack for the vision variant, and a mapping with
    ``images`` and ``features`` (or a ``SampleSet``) for the ensemble.
    """
    if isinstance(X, SampleSet):
        X = {"images": X.images, "features": X.features}
    if isinstance(X, dict):
        images, features = X.get("images"), X.get("features")
    elif variant is Variant.MORPHOLOGY:
        images, features = None, X
    elif variant is Variant.VISION:
        images, features = X, None
    else:
        raise TypeError("ensemble input must be a mapping with 'images' and 'features'")
    if variant.uses_images and images is None:
        raise ValueError(f"{variant.value} variant needs images")
    if variant.uses_features and features is None:
        raise ValueError(f"{variant.value} variant needs morphology features")
    n = {len(a) for a in (images, features) if a is not None}
    if len(n) > 1:
        raise ValueError("images and features disagree on sample count")
    return (images if variant.uses_images else None), (features if variant.uses_features else None)


class SDFClassifier(ClassifierMixin, BaseEstimator):
    """Fragmented (1) vs unfragmented (0) classifier with a 1024/256 MLP head.

    Parameters mirror ``ModelConfig`` and ``TrainConfig``. Morphometry is
    z-scored with statistics from the training rows seen by ``fit``.

    Validation data drives early stopping and checkpoint selection. Pass it
    as ``eval_set=(X_val, y_val)``; otherwise ``groups`` (patient ids) are
    required and ``validation_fraction`` of the patients are held out.
    """

    def __init__(self, variant="ensemble", backbone_id="gcvit_xxtiny", pretrained=True,
                 head_widths=(1024, 256), head_dropout=(0.6, 0.3), base_lr=5e-5, layer_decay=0.12,
                 warmup_proportion=0.1, patience=10, max_epochs=50, batch_size=32, augment=True,
                 validation_fraction=0.2, threshold=0.5, random_state=0):
        self.variant = variant
        self.backbone_id = backbone_id
        self.pretrained = pretrained
        self.head_widths = head_widths
        self.head_dropout = head_dropout
        self.base_lr = base_lr
        self.layer_decay = layer_decay
        self.warmup_proportion = warmup_proportion
        self.patience = patience
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.augment = augment
        self.validation_fraction = validation_fraction
        self.threshold = threshold
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig(variant=Variant(self.variant), backbone_id=self.backbone_id,
                           pretrained=self.pretrained, head_widths=tuple(self.head_widths),
                           head_dropout=tuple(self.head_dropout))

    def _train_config(self) -> TrainConfig:
        return TrainConfig(base_lr=self.base_lr, layer_decay=self.layer_decay,
                           warmup_proportion=self.warmup_proportion, patience=self.patience,
                           max_epochs=self.max_epochs, batch_size=self.batch_size,
                           seed=self.random_state, augment=self.augment).with_env_seed()

    def _samples(self, X, y=None, groups=None) -> SampleSet:
        variant = self.model_.variant
        images, features = split_inputs(X, variant)
        n = len(images) if images is not None else len(features)
        if y is None:
            labels = np.full(n, -1, dtype=np.float32)
        else:
            labels = np.asarray(y, dtype=np.float32).ravel()
            if len(labels) != n:
                raise ValueError(f"{n} samples but {len(labels)} labels")
            if not np.isin(labels, (0, 1)).all():
                raise ValueError("labels must be 0 (unfragmented) or 1 (fragmented)")
        ids = [str(g) for g in groups] if groups is not None else [f"sample-{i}" for i in range(n)]
        return SampleSet(
            cell_ids=[f"{i}" for i in range(n)],
            patient_ids=ids,
            labels=labels,
            images=None if images is None else _as_images(images, self.model_.cfg.image_size),
            features=None if features is None else prepare_features(_as_features(features), self.norm_stats_),
        )

    def fit(self, X, y, groups=None, eval_set=None, eval_groups=None, run_dir=None):
        variant = Variant(self.variant)
        y = np.asarray(y).ravel()
        if eval_set is None:
            if groups is None:
                raise ValueError("pass eval_set=(X_val, y_val) or patient groups for a held-out split")
            splitter = GroupShuffleSplit(n_splits=1, test_size=self.validation_fraction,
                                         random_state=self.random_state)
            tr, va = next(splitter.split(np.zeros(len(y)), y, groups))
            images, features = split_inputs(X, variant)
            pick = lambda a, idx: None if a is None else np.asarray(a)[idx]
            eval_set = ({"images": pick(images, va), "features": pick(features, va)}, y[va])
            eval_groups = np.asarray(groups)[va]
            X = {"images": pick(images, tr), "features": pick(features, tr)}
            y, groups = y[tr], np.asarray(groups)[tr]
        X_val, y_val = eval_set
        if groups is None and eval_groups is None:
            groups = [f"train-{i}" for i in range(len(y))]
            eval_groups = [f"val-{i}" for i in range(len(y_val))]

        cfg = self._train_config()
        torch.manual_seed(cfg.seed)
        self.model_ = build_model(self._model_config())
        self.norm_stats_ = None
        if variant.uses_features:
            self.norm_stats_ = compute_norm_stats(_as_features(split_inputs(X, variant)[1]))
        train = self._samples(X, y, groups)
        val = self._samples(X_val, y_val, eval_groups)
        result = fit(self.model_, train, val, cfg, run_dir=run_dir, norm_stats=self.norm_stats_)
        self.model_.load_state_dict(result.checkpoint.state_dict)
        self.model_.eval()
        self.best_epoch_ = result.checkpoint.epoch
        self.best_val_loss_ = result.checkpoint.val_loss
        self.logs_ = result.logs
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X):
        """Logits of the fragmented class."""
        check_is_fitted(self, "model_")
        samples = self._samples(X)
        with torch.no_grad():
            self.model_.eval()
            out = []
            for start in range(0, len(samples), 64):
                part = samples.subset(np.arange(start, min(start + 64, len(samples))))
                images = None if part.images is None else torch.from_numpy(part.images)
                feats = None if part.features is None else torch.from_numpy(part.features)
                out.append(self.model_(images, feats))
        return torch.cat(out).double().numpy() if out else np.zeros(0)

    def predict_proba(self, X):
        p = 1.0 / (1.0 + np.exp(-self.decision_function(X)))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= self.threshold).astype(int)

    def validation_loss(self, X, y) -> float:
        check_is_fitted(self, "model_")
        loss, _, _ = evaluate_loss(self.model_, self._samples(X, y))
        return loss

    def save(self, directory) -> Path:
        """Write a self-describing checkpoint directory."""
        check_is_fitted(self, "model_")
        directory = save_checkpoint(self.model_, directory, norm_stats=self.norm_stats_)
        (directory / "estimator.json").write_text(json.dumps(self.get_params(), indent=2, default=list) + "\n",
                                                  encoding="utf-8")
        return directory

    @classmethod
    def load(cls, directory) -> "SDFClassifier":
        directory = Path(directory)
        params_path = directory / "estimator.json"
        model, norm = load_checkpoint(directory)
        if params_path.exists():
            est = cls(**json.loads(params_path.read_text(encoding="utf-8")))
        else:
            c = model.cfg
            est = cls(variant=c.variant.value, backbone_id=c.backbone_id, pretrained=False,
                      head_widths=c.head_widths, head_dropout=c.head_dropout)
        est.model_ = model
        est.norm_stats_ = norm
        est.classes_ = np.array([0, 1])
        return est
