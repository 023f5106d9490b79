"""Synthetic phase-contrast cell crops with a tunable morphology/label link.

Each crop holds one dark elliptical head on a bright field, with a lighter
acrosomal cap and, for some cells, a darker vacuole disk. Fragmented heads
are drawn shorter and slightly narrower (rounder overall) and carry vacuoles
more often; ``morphology_effect`` sets the shift in standard-deviation units,
and at 0 both classes share one distribution.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage as ndi

from .data import CellRecord, Label, Manifest, write_manifest

LENGTH_MEAN_UM, LENGTH_SD_UM = 5.0, 0.35
WIDTH_MEAN_UM, WIDTH_SD_UM = 3.0, 0.25
WIDTH_SHIFT = 0.4  # width moves this fraction of the length shift, in its own SD units
MIN_AXIS_UM = 2.0
VACUOLE_BASE_RATE = 0.15
VACUOLE_EXTRA_RATE = 0.5

BACKGROUND, HEAD, ACROSOME, VACUOLE = 190.0, 70.0, 95.0, 25.0
NOISE_SD = 4.0
BLUR_SD_PX = 0.8


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 20
    cells_per_patient: int = 30
    frag_prevalence: float = 0.4
    morphology_effect: float = 2.0
    image_size: int = 96
    pixel_scale_um: float = 0.1
    seed: int = 0
    null_fraction: float = 0.0
    second_round_disagreement: float = 0.1

    def __post_init__(self):
        if self.n_patients < 1 or self.cells_per_patient < 1:
            raise ValueError("n_patients and cells_per_patient must be positive")
        if not 0 < self.frag_prevalence < 1:
            raise ValueError("frag_prevalence must lie in (0, 1)")
        if self.morphology_effect < 0:
            raise ValueError("morphology_effect must be non-negative")
        if self.image_size < 16 or self.pixel_scale_um <= 0:
            raise ValueError("image_size must be >= 16 and pixel_scale_um positive")
        if not 0 <= self.null_fraction < 1 or not 0 <= self.second_round_disagreement <= 1:
            raise ValueError("null_fraction and second_round_disagreement must be fractions")

    @classmethod
    def from_json(cls, obj) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass(frozen=True)
class CellGeometry:
    length_um: float
    width_um: float
    angle: float
    center: tuple[float, float]
    vacuole_fraction: float


def ellipse_mask(shape, center, semi_major, semi_minor, angle) -> np.ndarray:
    """Pixels whose centres fall inside the ellipse (``center`` is (x, y))."""
    yy, xx = np.mgrid[: shape[0], : shape[1]].astype(np.float64)
    dx, dy = xx - center[0], yy - center[1]
    c, s = math.cos(angle), math.sin(angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / semi_major) ** 2 + (v / semi_minor) ** 2 <= 1.0


def draw_geometry(rng: np.random.Generator, fragmented: bool, cfg: SynthConfig) -> CellGeometry:
    e = cfg.morphology_effect if fragmented else 0.0
    length = rng.normal(LENGTH_MEAN_UM - e * LENGTH_SD_UM, LENGTH_SD_UM)
    width = rng.normal(WIDTH_MEAN_UM - WIDTH_SHIFT * e * WIDTH_SD_UM, WIDTH_SD_UM)
    length = max(length, MIN_AXIS_UM / 0.95)
    width = float(np.clip(width, MIN_AXIS_UM, 0.95 * length))
    p_vac = VACUOLE_BASE_RATE + (VACUOLE_EXTRA_RATE * (1 - math.exp(-e)) if fragmented else 0.0)
    vac = float(rng.uniform(0.04, 0.10)) if rng.random() < p_vac else 0.0
    angle = float(rng.uniform(0, math.pi))
    half = cfg.image_size / 2
    jitter = rng.uniform(-2.0, 2.0, size=2)
    return CellGeometry(float(length), width, angle, (half + jitter[0], half + jitter[1]), vac)


def render_phase_contrast(geom: CellGeometry, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    shape = (cfg.image_size, cfg.image_size)
    a = geom.length_um / cfg.pixel_scale_um / 2
    b = geom.width_um / cfg.pixel_scale_um / 2
    head = ellipse_mask(shape, geom.center, a, b, geom.angle)
    img = np.full(shape, BACKGROUND)
    img[head] = HEAD
    # acrosomal cap: anterior ~third of the head along the major axis
    yy, xx = np.mgrid[: shape[0], : shape[1]].astype(np.float64)
    u = (xx - geom.center[0]) * math.cos(geom.angle) + (yy - geom.center[1]) * math.sin(geom.angle)
    img[head & (u > 0.35 * a)] = ACROSOME
    if geom.vacuole_fraction > 0:
        r = math.sqrt(geom.vacuole_fraction * head.sum() / math.pi)
        offset = -0.25 * a
        cx = geom.center[0] + offset * math.cos(geom.angle)
        cy = geom.center[1] + offset * math.sin(geom.angle)
        img[head & ((xx - cx) ** 2 + (yy - cy) ** 2 <= r * r)] = VACUOLE
    img = ndi.gaussian_filter(img, BLUR_SD_PX)
    img += rng.normal(0.0, NOISE_SD, size=shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def render_fluorescence(pc: np.ndarray, fragmented: bool) -> np.ndarray:
    head = pc < (BACKGROUND + HEAD) / 2
    glow = np.where(head, 200.0 if fragmented else 40.0, 10.0)
    return np.clip(ndi.gaussian_filter(glow, 1.5), 0, 255).astype(np.uint8)


def render_bright_field(pc: np.ndarray) -> np.ndarray:
    return np.clip(160 + 0.3 * (pc.astype(np.float64) - BACKGROUND), 0, 255).astype(np.uint8)


def _relabel(label: Label, rng: np.random.Generator) -> Label:
    others = [l for l in Label if l is not label]
    return others[int(rng.integers(len(others)))]


def generate(cfg: SynthConfig, out_dir) -> Manifest:
    """Render images and write ``manifest.jsonl`` plus ``synth_config.json`` under ``out_dir``.

    Round ``round_1`` holds the generating labels (with ``null_fraction`` of
    cells nulled); ``round_2`` re-annotates them with
    ``second_round_disagreement`` of cells changed.
    """
    out = Path(out_dir)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    records = []
    for p in range(cfg.n_patients):
        patient = f"P{p + 1:03d}"
        for c in range(cfg.cells_per_patient):
            cell = f"{patient}_C{c + 1:04d}"
            fragmented = bool(rng.random() < cfg.frag_prevalence)
            geom = draw_geometry(rng, fragmented, cfg)
            pc = render_phase_contrast(geom, cfg, rng)
            paths = {}
            for kind, arr in (("pc", pc), ("bf", render_bright_field(pc)),
                              ("fl", render_fluorescence(pc, fragmented))):
                paths[kind] = img_dir / f"{cell}_{kind}.png"
                Image.fromarray(arr).save(paths[kind], optimize=False)
            truth = Label.FRAGMENTED if fragmented else Label.UNFRAGMENTED
            first = Label.NULL if rng.random() < cfg.null_fraction else truth
            second = _relabel(first, rng) if rng.random() < cfg.second_round_disagreement else first
            records.append(CellRecord(
                cell_id=cell,
                patient_id=patient,
                phase_contrast_path=paths["pc"],
                bright_field_path=paths["bf"],
                fluorescence_path=paths["fl"],
                annotations={"round_1": first, "round_2": second},
            ))
    manifest = Manifest(tuple(records), pixel_scale_um=cfg.pixel_scale_um, primary_round="round_1")
    write_manifest(manifest, out / "manifest.jsonl")
    (out / "synth_config.json").write_text(json.dumps(asdict(cfg), indent=2) + "\n", encoding="utf-8")
    return manifest
