"""Fine-tuning loop: warmup plus layer-wise decayed learning rates, rotation/flip
augmentation, early stopping on validation loss and best-checkpoint retention.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage as ndi

from .data import Manifest
from .models import SDFNet, Variant, parameter_groups, save_checkpoint
from .morphometry import FeatureTable, NormStats, normalize

logger = logging.getLogger(__name__)

SEED_ENV = "SDF_SEED"
PROB_EPS = 1e-7


class LeakageError(AssertionError):
    """Training and validation sets share a patient."""


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 5e-5
    layer_decay: float = 0.12
    warmup_proportion: float = 0.1
    patience: int = 10
    min_delta: float = 1e-6
    max_epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    augment: bool = True
    rotation_degrees: float = 180.0
    hflip: bool = True
    vflip: bool = True
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        if not 0 < self.warmup_proportion < 1:
            raise ValueError("warmup_proportion must lie in (0, 1)")
        if not 0 < self.layer_decay <= 1:
            raise ValueError("layer_decay must lie in (0, 1]")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be positive")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")

    def to_json(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_json(cls, obj) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**obj)

    def with_env_seed(self) -> "TrainConfig":
        """Apply the ``SDF_SEED`` override, if set."""
        value = os.environ.get(SEED_ENV)
        return replace(self, seed=int(value)) if value not in (None, "") else self


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float
    lr_head: float


def lr_at(step: int, total_steps: int, group_index: int, cfg: TrainConfig) -> float:
    """Learning rate of parameter group ``group_index`` (0 = head) at ``step``.

    Linear ramp from 0 over the first ``warmup_proportion`` of training, then
    constant at ``base_lr * layer_decay ** group_index``.
    """
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if group_index < 0:
        raise ValueError("group_index must be non-negative")
    group_lr = cfg.base_lr * cfg.layer_decay ** group_index
    warmup_steps = cfg.warmup_proportion * total_steps
    if step < warmup_steps:
        return group_lr * step / warmup_steps
    return group_lr


@dataclass(frozen=True)
class AugmentDraw:
    angle: float = 0.0
    hflip: bool = False
    vflip: bool = False


def draw_augmentation(rng: np.random.Generator, cfg: TrainConfig | None = None) -> AugmentDraw:
    cfg = cfg or TrainConfig()
    angle = float(rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees)) if cfg.rotation_degrees else 0.0
    hflip = bool(rng.random() < 0.5) if cfg.hflip else False
    vflip = bool(rng.random() < 0.5) if cfg.vflip else False
    return AugmentDraw(angle, hflip, vflip)


def apply_augmentation(image: np.ndarray, draw: AugmentDraw) -> np.ndarray:
    out = np.asarray(image)
    if draw.angle:
        border = np.concatenate([out[0], out[-1], out[1:-1, 0], out[1:-1, -1]])
        out = ndi.rotate(out, draw.angle, reshape=False, order=1, mode="constant",
                         cval=float(np.median(border)))
    if draw.hflip:
        out = out[:, ::-1]
    if draw.vflip:
        out = out[::-1, :]
    return np.ascontiguousarray(out, dtype=np.asarray(image).dtype)


def augment(image, label, rng: np.random.Generator, cfg: TrainConfig | None = None, draw: AugmentDraw | None = None):
    """Random rotation and flips; the label is returned untouched."""
    if draw is None:
        draw = draw_augmentation(rng, cfg)
    return apply_augmentation(image, draw), label


def bce_loss(probabilities, labels):
    """Mean binary cross-entropy of probabilities against {0, 1} labels."""
    p = torch.as_tensor(probabilities, dtype=torch.float64) if not torch.is_tensor(probabilities) else probabilities
    y = torch.as_tensor(labels, dtype=p.dtype)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {tuple(p.shape)} probabilities vs {tuple(y.shape)} labels")
    p = p.clamp(PROB_EPS, 1 - PROB_EPS)
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p)).mean()


@dataclass
class SampleSet:
    """Per-cell arrays: ``images`` (N, S, S) float32 in [0, 1] at the backbone
    resolution, ``features`` (N, 7), raw when loaded and normalised before
    they reach a model.
    """

    cell_ids: list[str]
    patient_ids: list[str]
    labels: np.ndarray
    images: np.ndarray | None = None
    features: np.ndarray | None = None

    def __len__(self):
        return len(self.cell_ids)

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx, dtype=int)
        return SampleSet(
            [self.cell_ids[i] for i in idx],
            [self.patient_ids[i] for i in idx],
            self.labels[idx],
            None if self.images is None else self.images[idx],
            None if self.features is None else self.features[idx],
        )


def load_crop(path, size: int) -> np.ndarray:
    """Grayscale crop resized bilinearly to ``size``×``size``, scaled to [0, 1]."""
    with Image.open(path) as im:
        im = im.convert("L")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def prepare_features(values: np.ndarray, norm_stats: NormStats) -> np.ndarray:
    """Normalise and impute rows whose segmentation failed at the training mean (zero)."""
    z = normalize(values, norm_stats)
    bad = ~np.all(np.isfinite(z), axis=1)
    if bad.any():
        logger.warning("%d cell(s) without morphometry imputed at the training mean", int(bad.sum()))
        z[bad] = 0.0
    return z.astype(np.float32)


def load_samples(manifest: Manifest, variant: Variant, *, features: FeatureTable | None = None,
                 image_size: int | None = None, round_id: str | None = None) -> SampleSet:
    """Assemble a ``SampleSet`` for ``manifest`` ordered by cell id.

    Features are raw morphometry (NaN rows for failed segmentations); labels
    that are NULL in ``round_id`` become -1.
    """
    variant = Variant(variant)
    round_id = round_id or manifest.primary_round
    recs = sorted(manifest.records, key=lambda r: r.cell_id)
    codes = [r.label(round_id).code for r in recs]
    labels = np.array([-1 if c is None else c for c in codes], dtype=np.float32)
    images = feats = None
    if variant.uses_images:
        if image_size is None:
            raise ValueError("image_size required for image-consuming variants")
        images = np.stack([load_crop(r.phase_contrast_path, image_size) for r in recs]) if recs else \
            np.zeros((0, image_size, image_size), np.float32)
    if variant.uses_features:
        if features is None:
            raise ValueError("a feature table is required for morphology-consuming variants")
        feats = features.rows([r.cell_id for r in recs])
    return SampleSet([r.cell_id for r in recs], [r.patient_id for r in recs], labels, images, feats)


@dataclass
class Batch:
    indices: np.ndarray
    cell_ids: list[str]
    images: torch.Tensor | None
    features: torch.Tensor | None
    labels: torch.Tensor


def make_batch(samples: SampleSet, idx, augment_rng: np.random.Generator | None = None,
               cfg: TrainConfig | None = None) -> Batch:
    idx = np.asarray(idx, dtype=int)
    images = None
    if samples.images is not None:
        imgs = samples.images[idx]
        if augment_rng is not None:
            imgs = np.stack([augment(im, None, augment_rng, cfg)[0] for im in imgs])
        images = torch.from_numpy(np.ascontiguousarray(imgs, dtype=np.float32))
    features = None if samples.features is None else torch.from_numpy(samples.features[idx])
    return Batch(idx, [samples.cell_ids[i] for i in idx], images, features,
                 torch.from_numpy(samples.labels[idx].astype(np.float32)))


def _check_labels(samples: SampleSet, name: str):
    if len(samples) == 0:
        raise ValueError(f"{name} set is empty")
    if np.any((samples.labels != 0) & (samples.labels != 1)):
        raise ValueError(f"{name} set contains unlabelled cells; filter_supervised first")


@torch.no_grad()
def evaluate_loss(model: SDFNet, samples: SampleSet, batch_size: int = 64) -> tuple[float, float, np.ndarray]:
    """Evaluation-mode BCE loss, accuracy at 0.5, and per-sample probabilities."""
    was_training = model.training
    model.eval()
    logits = []
    try:
        for start in range(0, len(samples), batch_size):
            b = make_batch(samples, np.arange(start, min(start + batch_size, len(samples))))
            logits.append(model(b.images, b.features))
    finally:
        model.train(was_training)
    logit = torch.cat(logits).double()
    y = torch.from_numpy(samples.labels.astype(np.float64))
    loss = float(F.binary_cross_entropy_with_logits(logit, y))
    prob = torch.sigmoid(logit).numpy()
    acc = float(np.mean((prob >= 0.5) == (samples.labels == 1)))
    return loss, acc, prob


def _train_step(model: SDFNet, optimizer: torch.optim.Optimizer, batch: Batch) -> tuple[float, int]:
    """One parameter update; returns (loss, correct count)."""
    optimizer.zero_grad(set_to_none=True)
    logits = model(batch.images, batch.features)
    loss = F.binary_cross_entropy_with_logits(logits, batch.labels)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite training loss {loss.item()}")
    loss.backward()
    optimizer.step()
    correct = int(((logits.detach() >= 0) == (batch.labels >= 0.5)).sum())
    return float(loss.detach()), correct


class EarlyStopping:
    """Stop after ``patience`` epochs without a decrease larger than ``min_delta``."""

    def __init__(self, patience: int = 10, min_delta: float = 1e-6):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = None
        self.bad_epochs = 0

    def step(self, value: float, epoch: int) -> bool:
        """Record one epoch; returns True if ``value`` is a new best."""
        if value < self.best - self.min_delta:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class Checkpoint:
    state_dict: dict
    epoch: int
    val_loss: float


@dataclass
class FitResult:
    checkpoint: Checkpoint
    logs: list[EpochLog] = field(default_factory=list)

    def __iter__(self):
        return iter((self.checkpoint, self.logs))


def build_optimizer(model: SDFNet, cfg: TrainConfig) -> torch.optim.Adam:
    groups = [{"params": params, "lr": 0.0, "group_index": k}
              for k, params in parameter_groups(model) if params]
    return torch.optim.Adam(groups, lr=0.0, betas=cfg.adam_betas, eps=cfg.adam_eps,
                            weight_decay=cfg.weight_decay)


def fit(model: SDFNet, train: SampleSet, val: SampleSet, cfg: TrainConfig, *,
        run_dir=None, norm_stats: NormStats | None = None,
        evaluate: Callable[[SDFNet, SampleSet], tuple[float, float]] | None = None) -> FitResult:
    """Train ``model`` in place and return the minimum-validation-loss checkpoint.

    ``evaluate(model, samples) -> (loss, accuracy)`` replaces the default
    validation pass (used to script loss sequences in tests). When
    ``run_dir`` is given, ``config.json``, ``epochs.jsonl`` and ``best/`` are
    written there as training proceeds.

    Raises:
        LeakageError: a patient appears in both ``train`` and ``val``.
        FloatingPointError: a training loss became non-finite.
    """
    overlap = set(train.patient_ids) & set(val.patient_ids)
    if overlap:
        raise LeakageError(f"patients in both training and validation sets: {sorted(overlap)[:5]}")
    _check_labels(train, "training")
    _check_labels(val, "validation")
    if evaluate is None:
        def evaluate(m, s):
            loss, acc, _ = evaluate_loss(m, s, batch_size=max(cfg.batch_size, 64))
            return loss, acc

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    optimizer = build_optimizer(model, cfg)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.max_epochs

    epochs_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(
            {"train": cfg.to_json(), "model": model.cfg.to_json()}, indent=2) + "\n", encoding="utf-8")
        epochs_path = run_dir / "epochs.jsonl"
        epochs_path.write_text("", encoding="utf-8")

    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    best = None
    logs: list[EpochLog] = []
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = rng.permutation(len(train))
        loss_sum, correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            for group in optimizer.param_groups:
                group["lr"] = lr_at(step, total_steps, group["group_index"], cfg)
            batch = make_batch(train, idx, rng if cfg.augment else None, cfg)
            loss, n_correct = _train_step(model, optimizer, batch)
            loss_sum += loss * len(idx)
            correct += n_correct
            step += 1
        val_loss, val_acc = evaluate(model, val)
        if not math.isfinite(val_loss):
            raise FloatingPointError(f"non-finite validation loss at epoch {epoch}")
        log = EpochLog(epoch, loss_sum / len(train), float(val_loss), correct / len(train), float(val_acc),
                       lr_at(min(step, total_steps), total_steps, 0, cfg))
        logs.append(log)
        if stopper.step(val_loss, epoch):
            best = Checkpoint(copy.deepcopy(model.state_dict()), epoch, float(val_loss))
            if run_dir is not None:
                save_checkpoint(model, run_dir / "best", norm_stats=norm_stats)
        if epochs_path is not None:
            with open(epochs_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(asdict(log)) + "\n")
        logger.info("epoch %d train_loss=%.4f val_loss=%.4f val_acc=%.3f", epoch, log.train_loss,
                    val_loss, val_acc)
        if stopper.should_stop:
            logger.info("early stop at epoch %d (best epoch %d)", epoch, best.epoch)
            break
    if best is None:
        # every epoch failed to beat +inf only if losses were inf, which is rejected above
        raise RuntimeError("no checkpoint recorded")
    return FitResult(best, logs)


def overfit_sanity(model: SDFNet, batch: SampleSet, steps: int = 200, lr: float = 1e-3, seed: int = 0) -> float:
    """Memorise a fixed batch with dropout off; returns the final training loss.

    A healthy model/optimiser pairing should drive the loss near zero on a
    learnable batch.
    """
    torch.manual_seed(seed)
    model.eval()  # dropout off; the backbone has no batch-norm
    optimizer = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=lr)
    b = make_batch(batch, np.arange(len(batch)))
    for _ in range(steps):
        _train_step(model, optimizer, b)
    with torch.no_grad():
        final = float(F.binary_cross_entropy_with_logits(model(b.images, b.features), b.labels))
    if not math.isfinite(final):
        raise FloatingPointError("non-finite loss in overfit check")
    return final


def read_epoch_logs(path) -> list[EpochLog]:
    with open(path, encoding="utf-8") as fh:
        return [EpochLog(**json.loads(line)) for line in fh if line.strip()]
