"""Head morphometry from single-cell phase-contrast crops.

Segmentation thresholds a lightly smoothed image between its dark level and
the border (background) level, keeps the largest connected dark component,
and fits an ellipse from the mask's second-order moments.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image
from scipy import ndimage as ndi
from skimage import measure as skmeasure
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

logger = logging.getLogger(__name__)

FEATURE_NAMES = (
    "head_length_um",
    "head_width_um",
    "aspect_ratio",
    "head_area_um2",
    "acrosome_area_fraction",
    "vacuole_present",
    "vacuole_area_fraction",
)
FEATURES_BINARY = ("vacuole_present",)
N_FEATURES = len(FEATURE_NAMES)
CSV_HEADER = ("cell_id",) + FEATURE_NAMES + ("failed",)

VACUOLE_SIGMA = 2.0
VACUOLE_MIN_AREA_FRACTION = 0.01
MIN_CONTRAST_TO_NOISE = 5.0


class SegmentationError(RuntimeError):
    """No connected component passed the head-area gate."""


@dataclass(frozen=True)
class CalibrationConfig:
    pixel_scale_um: float = 0.1
    segmentation_threshold_quantile: float = 0.5
    min_head_area_px: int = 50
    smoothing_sigma_px: float = 1.0

    def __post_init__(self):
        if not self.pixel_scale_um > 0:
            raise ValueError("pixel_scale_um must be positive")
        if not 0 < self.segmentation_threshold_quantile < 1:
            raise ValueError("segmentation_threshold_quantile must lie in (0, 1)")
        if int(self.min_head_area_px) <= 0:
            raise ValueError("min_head_area_px must be a positive integer")
        if self.smoothing_sigma_px < 0:
            raise ValueError("smoothing_sigma_px must be non-negative")


@dataclass(frozen=True)
class MorphologyFeatures:
    head_length_um: float
    head_width_um: float
    aspect_ratio: float
    head_area_um2: float
    acrosome_area_fraction: float
    vacuole_present: int
    vacuole_area_fraction: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in FEATURE_NAMES], dtype=np.float64)


def read_image(path) -> np.ndarray:
    """Load an image as a 2-D float64 array on its native intensity scale."""
    with Image.open(path) as im:
        if im.mode not in ("L", "I", "I;16", "F"):
            im = im.convert("L")
        return np.asarray(im, dtype=np.float64)


def _as_gray(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] in (3, 4):
        img = img[..., :3].mean(axis=-1)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"expected a non-empty single-channel 2-D image, got shape {img.shape}")
    return img


def _border(img: np.ndarray) -> np.ndarray:
    return np.concatenate([img[0, :], img[-1, :], img[1:-1, 0], img[1:-1, -1]])


def segment_head(image, cfg: CalibrationConfig) -> np.ndarray:
    """Binary mask of the sperm head (dark object on a brighter field).

    Raises:
        SegmentationError: if no connected region reaches ``cfg.min_head_area_px``.
    """
    img = _as_gray(image)
    smooth = ndi.gaussian_filter(img, cfg.smoothing_sigma_px) if cfg.smoothing_sigma_px else img
    background = float(np.median(_border(smooth)))
    # smoothing already suppresses isolated outlier pixels, so the minimum is a
    # stable dark level even when the head covers a small part of the crop
    dark = float(smooth.min())
    if background - dark <= 0:
        raise SegmentationError("no contrast between object and background")
    q = cfg.segmentation_threshold_quantile
    threshold = dark + q * (background - dark)
    # refine the dark level to the typical object intensity so a few very dark
    # interior pixels (vacuoles) do not pull the boundary inward
    body = float(np.median(smooth[smooth < threshold]))
    threshold = body + q * (background - body)
    raw_border = _border(img)
    noise = 1.4826 * float(np.median(np.abs(raw_border - np.median(raw_border))))
    if background - body < MIN_CONTRAST_TO_NOISE * noise:
        raise SegmentationError("object contrast indistinguishable from background noise")
    foreground = ndi.binary_fill_holes(smooth < threshold)
    labels = skmeasure.label(foreground, connectivity=2)
    if labels.max() == 0:
        raise SegmentationError("no foreground component found")
    areas = np.bincount(labels.ravel())
    areas[0] = 0
    best = int(np.argmax(areas))
    if areas[best] < cfg.min_head_area_px:
        raise SegmentationError(
            f"largest component has {areas[best]} px, below min_head_area_px={cfg.min_head_area_px}"
        )
    return labels == best


def _ellipse_axes_px(mask: np.ndarray) -> tuple[float, float]:
    rows, cols = np.nonzero(mask)
    cov = np.cov(np.vstack([cols, rows]).astype(np.float64), bias=True)
    evals = np.linalg.eigvalsh(cov)
    # filled ellipse: variance along a semi-axis a is a^2 / 4
    minor, major = (4.0 * math.sqrt(max(v, 0.0)) for v in evals)
    return major, minor


def _vacuoles(img: np.ndarray, mask: np.ndarray) -> tuple[int, float]:
    interior = ndi.binary_erosion(mask, iterations=1)
    if not interior.any():
        return 0, 0.0
    values = img[interior]
    center = float(np.median(values))
    spread = 1.4826 * float(np.median(np.abs(values - center)))
    floor = 1e-3 * float(img.max() - img.min())
    cutoff = VACUOLE_SIGMA * max(spread, floor, 1e-12)
    # dark side only: the lighter acrosomal cap must not register
    outliers = interior & (img < center - cutoff)
    labels = skmeasure.label(outliers, connectivity=1)
    if labels.max() == 0:
        return 0, 0.0
    areas = np.bincount(labels.ravel())[1:]
    head_area = int(mask.sum())
    kept = areas[areas >= VACUOLE_MIN_AREA_FRACTION * head_area]
    if kept.size == 0:
        return 0, 0.0
    return 1, float(kept.sum()) / head_area


def _acrosome_fraction(img: np.ndarray, mask: np.ndarray) -> float:
    values = img[mask]
    q1, q3 = np.percentile(values, [25.0, 75.0])
    if q3 <= q1:
        cutoff = float(np.median(values))
    else:
        cutoff = 0.5 * (q1 + q3)
    return float(np.mean(values > cutoff))


def measure(image, cfg: CalibrationConfig, mask: np.ndarray | None = None) -> MorphologyFeatures:
    """Calibrated morphometry of the single cell in ``image``.

    Lengths are full major/minor axis extents of the moment-equivalent
    ellipse. A precomputed ``mask`` skips segmentation.
    """
    img = _as_gray(image)
    if mask is None:
        mask = segment_head(img, cfg)
    major_px, minor_px = _ellipse_axes_px(mask)
    minor_px = max(minor_px, 1e-9)
    s = cfg.pixel_scale_um
    length, width = major_px * s, minor_px * s
    present, vac_frac = _vacuoles(img, mask)
    return MorphologyFeatures(
        head_length_um=length,
        head_width_um=width,
        aspect_ratio=length / width,
        head_area_um2=float(mask.sum()) * s * s,
        acrosome_area_fraction=_acrosome_fraction(img, mask),
        vacuole_present=present,
        vacuole_area_fraction=vac_frac,
    )


@dataclass
class FeatureTable:
    """Per-cell morphometry rows ordered by ``cell_id``.

    Failed cells keep a row of NaNs with ``failed`` set, so they stay visible.
    """

    cell_ids: list[str]
    values: np.ndarray
    failed: np.ndarray
    errors: dict[str, str] | None = None

    def __len__(self):
        return len(self.cell_ids)

    @property
    def n_failed(self) -> int:
        return int(self.failed.sum())

    def index(self) -> dict[str, int]:
        return {cid: i for i, cid in enumerate(self.cell_ids)}

    def rows(self, cell_ids) -> np.ndarray:
        """Feature rows for ``cell_ids`` in the given order (KeyError if absent)."""
        idx = self.index()
        missing = [c for c in cell_ids if c not in idx]
        if missing:
            raise KeyError(f"{len(missing)} cell(s) missing from feature table, e.g. {missing[:3]}")
        return self.values[[idx[c] for c in cell_ids]]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for cid, row, bad in zip(self.cell_ids, self.values, self.failed):
            cells = ["" if not np.isfinite(v) else repr(float(v)) for v in row]
            if not bad:
                cells[FEATURE_NAMES.index("vacuole_present")] = str(int(row[5]))
            writer.writerow([cid, *cells, int(bool(bad))])
        text = buf.getvalue()
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def read_csv(cls, path) -> "FeatureTable":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader, ()))
            if header != CSV_HEADER:
                raise ValueError(f"{path}: unexpected feature header {header}")
            ids, vals, failed = [], [], []
            for row in reader:
                ids.append(row[0])
                vals.append([float(v) if v != "" else math.nan for v in row[1:-1]])
                failed.append(row[-1] == "1")
        return cls(ids, np.asarray(vals, dtype=np.float64).reshape(len(ids), len(FEATURE_NAMES)),
                   np.asarray(failed, dtype=bool))


def extract_batch(manifest, cfg: CalibrationConfig | None = None, n_jobs: int = 1) -> FeatureTable:
    """Measure every record's phase-contrast image.

    Segmentation failures are flagged per row. Unreadable files are collected
    and raised together as one ``OSError`` after the whole batch is processed.
    """
    if cfg is None:
        cfg = CalibrationConfig(pixel_scale_um=manifest.pixel_scale_um)
    records = sorted(manifest.records, key=lambda r: r.cell_id)

    def work(rec):
        try:
            img = read_image(rec.phase_contrast_path)
        except OSError as exc:
            return rec.cell_id, None, f"io: {exc}"
        try:
            return rec.cell_id, measure(img, cfg).as_array(), None
        except SegmentationError as exc:
            return rec.cell_id, None, f"segmentation: {exc}"

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(work, records))
    else:
        results = [work(r) for r in records]

    io_errors = {cid: err for cid, _, err in results if err and err.startswith("io:")}
    if io_errors:
        detail = "; ".join(f"{k}: {v}" for k, v in list(io_errors.items())[:5])
        raise OSError(f"{len(io_errors)} image(s) could not be read: {detail}")

    values = np.full((len(results), len(FEATURE_NAMES)), np.nan)
    failed = np.zeros(len(results), dtype=bool)
    errors = {}
    for i, (cid, vec, err) in enumerate(results):
        if vec is None:
            failed[i] = True
            errors[cid] = err
        else:
            values[i] = vec
    if errors:
        logger.warning("segmentation failed for %d of %d cells", len(errors), len(results))
    return FeatureTable([r.cell_id for r in records], values, failed, errors)


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]
    binary: tuple[bool, ...]

    def to_json(self) -> dict:
        return {"features": list(FEATURE_NAMES), **asdict(self)}

    @classmethod
    def from_json(cls, obj: Mapping) -> "NormStats":
        return cls(**{f.name: tuple(obj[f.name]) for f in fields(cls)})


def compute_norm_stats(train_values: np.ndarray) -> NormStats:
    """Column means/stds over training rows only; zero std is replaced by one."""
    x = np.asarray(train_values, dtype=np.float64)
    x = x[np.all(np.isfinite(x), axis=1)]
    if len(x) == 0:
        raise ValueError("no finite training rows to compute normalisation statistics")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0] = 1.0
    binary = tuple(name in FEATURES_BINARY for name in FEATURE_NAMES)
    return NormStats(tuple(mean.tolist()), tuple(std.tolist()), binary)


def normalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """Z-score continuous columns with training statistics; binary columns pass through."""
    x = np.asarray(values, dtype=np.float64)
    z = (x - np.asarray(stats.mean)) / np.asarray(stats.std)
    binary = np.asarray(stats.binary)
    z[:, binary] = x[:, binary]
    return z


class FeatureNormalizer(TransformerMixin, BaseEstimator):
    """``normalize`` as a transformer; fit it on training rows only."""

    def fit(self, X, y=None):
        X = check_array(X, ensure_all_finite="allow-nan")
        if X.shape[1] != len(FEATURE_NAMES):
            raise ValueError(f"expected {len(FEATURE_NAMES)} feature columns, got {X.shape[1]}")
        self.stats_ = compute_norm_stats(X)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        X = check_array(X, ensure_all_finite="allow-nan")
        return normalize(X, self.stats_)


class MorphologyExtractor(TransformerMixin, BaseEstimator):
    """Images to a ``(n, 7)`` morphometry matrix; failed cells become NaN rows."""

    def __init__(self, pixel_scale_um=0.1, segmentation_threshold_quantile=0.5, min_head_area_px=50):
        self.pixel_scale_um = pixel_scale_um
        self.segmentation_threshold_quantile = segmentation_threshold_quantile
        self.min_head_area_px = min_head_area_px

    def fit(self, X, y=None):
        self.calibration_ = CalibrationConfig(
            pixel_scale_um=self.pixel_scale_um,
            segmentation_threshold_quantile=self.segmentation_threshold_quantile,
            min_head_area_px=self.min_head_area_px,
        )
        return self

    def transform(self, X):
        check_is_fitted(self, "calibration_")
        out = np.full((len(X), len(FEATURE_NAMES)), np.nan)
        for i, img in enumerate(X):
            try:
                out[i] = measure(img, self.calibration_).as_array()
            except SegmentationError:
                pass
        return out
