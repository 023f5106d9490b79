"""Vision, morphology and ensemble classifiers sharing one MLP head.

The vision pathway is a global-context vision transformer (timm ``gcvit_*``)
whose pooled embedding feeds the head; the ensemble concatenates that
embedding with the normalised morphometry vector.
"""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch
from torch import nn

from .morphometry import N_FEATURES

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# Reduced GC-ViT for CPU tests and synthetic runs; never pretrained.
_MICRO_KWARGS = dict(img_size=64, embed_dim=16, depths=(1, 1, 1, 1), num_heads=(1, 1, 2, 4),
                     window_ratio=(32, 32, 16, 32), mlp_ratio=2.0)

BACKBONES = {
    "gcvit_xxtiny": dict(timm_name="gcvit_xxtiny", image_size=224),
    "gcvit_xtiny": dict(timm_name="gcvit_xtiny", image_size=224),
    "gcvit_tiny": dict(timm_name="gcvit_tiny", image_size=224),
    "gcvit_small": dict(timm_name="gcvit_small", image_size=224),
    "gcvit_base": dict(timm_name="gcvit_base", image_size=224),
    "gcvit_micro": dict(timm_name=None, image_size=64),
}
DEFAULT_BACKBONE = "gcvit_xxtiny"


class Variant(str, enum.Enum):
    VISION = "vision"
    MORPHOLOGY = "morphology"
    ENSEMBLE = "ensemble"

    @property
    def uses_images(self) -> bool:
        return self is not Variant.MORPHOLOGY

    @property
    def uses_features(self) -> bool:
        return self is not Variant.VISION


@dataclass(frozen=True)
class ModelConfig:
    variant: Variant = Variant.ENSEMBLE
    backbone_id: str = DEFAULT_BACKBONE
    pretrained: bool = True
    embed_dim: int | None = None
    morph_dim: int = N_FEATURES
    head_widths: tuple[int, ...] = (1024, 256)
    head_dropout: tuple[float, ...] = (0.6, 0.3)
    negative_slope: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))
        object.__setattr__(self, "head_dropout", tuple(float(p) for p in self.head_dropout))
        if len(self.head_widths) != len(self.head_dropout):
            raise ValueError("head_widths and head_dropout must have equal length")
        if self.variant.uses_images and self.backbone_id not in BACKBONES:
            raise ValueError(f"unknown backbone id {self.backbone_id!r}; known: {sorted(BACKBONES)}")

    @property
    def image_size(self) -> int | None:
        return BACKBONES[self.backbone_id]["image_size"] if self.variant.uses_images else None

    @property
    def head_in_dim(self) -> int:
        if self.variant is Variant.MORPHOLOGY:
            return self.morph_dim
        if self.embed_dim is None:
            raise ValueError("embed_dim unresolved; build the backbone first")
        return self.embed_dim + (self.morph_dim if self.variant is Variant.ENSEMBLE else 0)

    def to_json(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["head_widths"] = list(self.head_widths)
        d["head_dropout"] = list(self.head_dropout)
        return d

    @classmethod
    def from_json(cls, obj) -> "ModelConfig":
        return cls(**obj)


def head_parameter_count(in_dim: int, widths=(1024, 256)) -> int:
    dims = [in_dim, *widths, 1]
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


class ClassificationHead(nn.Sequential):
    """dense -> LeakyReLU -> dropout, per hidden width, then dense -> one logit."""

    def __init__(self, in_dim, widths=(1024, 256), dropout=(0.6, 0.3), negative_slope=0.01):
        layers = []
        prev = in_dim
        for width, p in zip(widths, dropout):
            layers += [nn.Linear(prev, width), nn.LeakyReLU(negative_slope), nn.Dropout(p)]
            prev = width
        layers.append(nn.Linear(prev, 1))
        super().__init__(*layers)


class GCViTBackbone(nn.Module):
    """Pooled-embedding wrapper exposing transformer stages for layer-wise decay.

    ``stages`` runs input-most to output-most. The stem is grouped with the
    first stage and the final norm/pool with the last.
    """

    def __init__(self, backbone_id: str, pretrained: bool = True):
        super().__init__()
        import timm
        from timm.models.gcvit import GlobalContextVit

        spec = BACKBONES[backbone_id]
        if spec["timm_name"] is None:
            if pretrained:
                raise ValueError(f"backbone {backbone_id!r} has no pretrained weights")
            self.net = GlobalContextVit(num_classes=0, **_MICRO_KWARGS)
        else:
            try:
                self.net = timm.create_model(spec["timm_name"], pretrained=pretrained, num_classes=0)
            except Exception as exc:  # download/cache failures surface from several libraries
                raise RuntimeError(
                    f"could not load pretrained weights for {backbone_id!r} ({exc}); "
                    "pre-populate the torch hub cache or pass pretrained=False"
                ) from exc
        self.backbone_id = backbone_id
        self.image_size = spec["image_size"]
        self.embed_dim = int(self.net.num_features)

    def stage_modules(self) -> list[list[nn.Module]]:
        stages = [[s] for s in self.net.stages]
        stages[0].insert(0, self.net.stem)
        stages[-1].append(self.net.head)
        return stages

    def forward(self, x):
        return self.net(x)


class SDFNet(nn.Module):
    def __init__(self, cfg: ModelConfig, backbone: GCViTBackbone | None = None):
        super().__init__()
        self.cfg = cfg
        self.backbone = backbone
        if cfg.variant.uses_images and backbone is None:
            raise ValueError(f"{cfg.variant.value} model needs a backbone")
        self.head = ClassificationHead(cfg.head_in_dim, cfg.head_widths, cfg.head_dropout, cfg.negative_slope)
        self.register_buffer("pixel_mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    @property
    def variant(self) -> Variant:
        return self.cfg.variant

    def embed_images(self, images):
        """``images``: (N, H, W) grayscale in [0, 1] at the backbone resolution."""
        x = images.unsqueeze(1).expand(-1, 3, -1, -1)
        x = (x - self.pixel_mean) / self.pixel_std
        return self.backbone(x)

    def forward(self, images=None, features=None):
        parts = []
        if self.variant.uses_images:
            if images is None:
                raise ValueError(f"{self.variant.value} model requires images")
            parts.append(self.embed_images(images))
        if self.variant.uses_features:
            if features is None:
                raise ValueError(f"{self.variant.value} model requires morphology features")
            if features.shape[-1] != self.cfg.morph_dim:
                raise ValueError(f"expected {self.cfg.morph_dim} morphology features, got {features.shape[-1]}")
            parts.append(features)
        x = parts[0] if len(parts) == 1 else torch.cat(parts, dim=1)
        if x.shape[-1] != self.cfg.head_in_dim:
            raise ValueError(f"head expects width {self.cfg.head_in_dim}, got {x.shape[-1]}")
        return self.head(x).squeeze(-1)

    @torch.no_grad()
    def predict_proba(self, images=None, features=None):
        was_training = self.training
        self.eval()
        try:
            return torch.sigmoid(self(images, features))
        finally:
            self.train(was_training)


def build_model(cfg: ModelConfig, seed: int | None = None) -> SDFNet:
    """Instantiate the classifier for ``cfg.variant``.

    Raises:
        ValueError: unknown backbone id or a dimension mismatch between
            ``cfg.embed_dim`` and the backbone.
    """
    if seed is not None:
        torch.manual_seed(seed)
    backbone = None
    if cfg.variant.uses_images:
        backbone = GCViTBackbone(cfg.backbone_id, pretrained=cfg.pretrained)
        if cfg.embed_dim is not None and cfg.embed_dim != backbone.embed_dim:
            raise ValueError(
                f"embed_dim {cfg.embed_dim} does not match backbone {cfg.backbone_id} width {backbone.embed_dim}"
            )
        cfg = replace(cfg, embed_dim=backbone.embed_dim)
    return SDFNet(cfg, backbone)


@dataclass
class ParameterGroups:
    groups: list[tuple[int, list[nn.Parameter]]] = field(default_factory=list)

    def __len__(self):
        return len(self.groups)

    def __iter__(self):
        return iter(self.groups)


def parameter_groups(model: SDFNet) -> ParameterGroups:
    """Group 0 is the head; groups 1..L walk the backbone from output to input."""
    groups = [(0, [p for p in model.head.parameters() if p.requires_grad])]
    if model.backbone is not None:
        for k, modules in enumerate(reversed(model.backbone.stage_modules()), start=1):
            params = [p for m in modules for p in m.parameters() if p.requires_grad]
            groups.append((k, params))
    return ParameterGroups(groups)


CHECKPOINT_WEIGHTS = "model.bin"
CHECKPOINT_CONFIG = "config.json"
CHECKPOINT_NORM = "norm_stats.json"


def save_checkpoint(model: SDFNet, directory, norm_stats=None, state_dict=None) -> Path:
    """Write ``model.bin``, ``config.json`` and ``norm_stats.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfg = model.cfg
    torch.save(state_dict if state_dict is not None else model.state_dict(), directory / CHECKPOINT_WEIGHTS)
    (directory / CHECKPOINT_CONFIG).write_text(json.dumps(cfg.to_json(), indent=2) + "\n", encoding="utf-8")
    norm = norm_stats.to_json() if norm_stats is not None else None
    (directory / CHECKPOINT_NORM).write_text(json.dumps(norm, indent=2) + "\n", encoding="utf-8")
    return directory


def load_checkpoint(directory):
    """Rebuild a model from a checkpoint directory; returns ``(model, norm_stats)``."""
    from .morphometry import NormStats

    directory = Path(directory)
    cfg = ModelConfig.from_json(json.loads((directory / CHECKPOINT_CONFIG).read_text(encoding="utf-8")))
    # weights come from the checkpoint, never re-downloaded
    model = build_model(replace(cfg, pretrained=False))
    model.load_state_dict(torch.load(directory / CHECKPOINT_WEIGHTS, map_location="cpu", weights_only=True))
    model.eval()
    norm_path = directory / CHECKPOINT_NORM
    norm = json.loads(norm_path.read_text(encoding="utf-8")) if norm_path.exists() else None
    return model, (NormStats.from_json(norm) if norm else None)
