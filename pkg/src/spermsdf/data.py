"""Cell manifests: loading, validation, supervision filtering and patient-grouped splits.

A manifest is a line-delimited JSON file, one spermatozoon per line::

    {"cell_id": "p01_c0003", "patient_id": "p01", "phase_contrast": "images/p01_c0003_pc.png",
     "bright_field": null, "fluorescence": null, "annotations": {"round_1": "fragmented"}}

An optional first line without ``cell_id`` carries manifest-level settings
(``pixel_scale_um`` and ``primary_round``). Relative image paths resolve
against the manifest's directory.
"""
from __future__ import annotations

import enum
import json
import logging
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

logger = logging.getLogger(__name__)

DEFAULT_ROUND = "round_1"


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifest content."""


class SplitError(ValueError):
    pass


class Label(enum.Enum):
    UNFRAGMENTED = "unfragmented"
    FRAGMENTED = "fragmented"
    NULL = "null"

    @property
    def code(self) -> int | None:
        """Integer training target; ``None`` for NULL, which is never supervised."""
        return _LABEL_CODES[self]

    @classmethod
    def parse(cls, value) -> "Label":
        if value is None:
            return cls.NULL
        if isinstance(value, Label):
            return value
        if isinstance(value, bool):
            raise ValueError(f"invalid label {value!r}")
        if isinstance(value, int):
            return {0: cls.UNFRAGMENTED, 1: cls.FRAGMENTED}[value]
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(
                f"invalid label {value!r}; expected 'fragmented', 'unfragmented' or 'null'"
            ) from None


_LABEL_CODES = {Label.UNFRAGMENTED: 0, Label.FRAGMENTED: 1, Label.NULL: None}


@dataclass(frozen=True)
class CellRecord:
    cell_id: str
    patient_id: str
    phase_contrast_path: Path
    bright_field_path: Path | None = None
    fluorescence_path: Path | None = None
    annotations: Mapping[str, Label] = field(default_factory=dict)

    def __post_init__(self):
        if not self.cell_id:
            raise ManifestError("cell_id must be a non-empty string")
        if not self.patient_id:
            raise ManifestError(f"cell {self.cell_id}: patient_id must be non-empty")
        if not self.phase_contrast_path or str(self.phase_contrast_path) in ("", "."):
            raise ManifestError(f"cell {self.cell_id}: missing phase-contrast path")

    def label(self, round_id: str) -> Label:
        """Annotation in ``round_id``; a missing round reads as NULL."""
        return self.annotations.get(round_id, Label.NULL)

    def to_json(self, base_dir: Path | None = None) -> dict:
        def rel(p):
            if p is None:
                return None
            p = Path(p)
            if base_dir is not None:
                try:
                    return p.relative_to(base_dir).as_posix()
                except ValueError:
                    pass
            return p.as_posix()

        return {
            "cell_id": self.cell_id,
            "patient_id": self.patient_id,
            "phase_contrast": rel(self.phase_contrast_path),
            "bright_field": rel(self.bright_field_path),
            "fluorescence": rel(self.fluorescence_path),
            "annotations": {k: v.value for k, v in self.annotations.items()},
        }


@dataclass(frozen=True)
class Manifest:
    records: tuple[CellRecord, ...]
    pixel_scale_um: float = 1.0
    primary_round: str = DEFAULT_ROUND

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if not self.pixel_scale_um > 0:
            raise ManifestError(f"pixel_scale_um must be positive, got {self.pixel_scale_um}")
        seen = set()
        for rec in self.records:
            if rec.cell_id in seen:
                raise ManifestError(f"duplicate cell_id {rec.cell_id!r}")
            seen.add(rec.cell_id)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def patients(self) -> list[str]:
        return sorted({r.patient_id for r in self.records})

    @property
    def rounds(self) -> list[str]:
        return sorted({k for r in self.records for k in r.annotations})

    def with_records(self, records: Iterable[CellRecord]) -> "Manifest":
        return replace(self, records=tuple(records))

    def subset_patients(self, patients: Iterable[str]) -> "Manifest":
        keep = set(patients)
        return self.with_records(r for r in self.records if r.patient_id in keep)


@dataclass(frozen=True)
class SplitManifest:
    train_patients: frozenset[str]
    val_patients: frozenset[str]
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "train_patients", frozenset(self.train_patients))
        object.__setattr__(self, "val_patients", frozenset(self.val_patients))
        overlap = self.train_patients & self.val_patients
        if overlap:
            raise SplitError(f"patients in both train and validation: {sorted(overlap)}")

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "train_patients": sorted(self.train_patients),
            "val_patients": sorted(self.val_patients),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "SplitManifest":
        try:
            return cls(
                train_patients=frozenset(obj["train_patients"]),
                val_patients=frozenset(obj["val_patients"]),
                seed=int(obj["seed"]),
            )
        except KeyError as exc:
            raise SplitError(f"split file missing key {exc}") from None

    def materialize(self, manifest: Manifest) -> tuple[Manifest, Manifest]:
        """Partition ``manifest`` records into (train, validation) by patient."""
        unknown = set(manifest.patients) - self.train_patients - self.val_patients
        if unknown:
            raise SplitError(f"manifest patients absent from split: {sorted(unknown)}")
        return manifest.subset_patients(self.train_patients), manifest.subset_patients(self.val_patients)


def _opt_path(value, base: Path) -> Path | None:
    if value is None or value == "":
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def _parse_record(obj: Mapping, base: Path) -> CellRecord:
    for key in ("cell_id", "patient_id"):
        if not isinstance(obj.get(key), str):
            raise ManifestError(f"field {key!r} must be a string")
    if not obj.get("phase_contrast"):
        raise ManifestError(f"cell {obj['cell_id']}: missing phase-contrast path")
    raw = obj.get("annotations") or {}
    if not isinstance(raw, Mapping):
        raise ManifestError("field 'annotations' must be an object")
    try:
        annotations = {str(k): Label.parse(v) for k, v in raw.items()}
    except ValueError as exc:
        raise ManifestError(str(exc)) from None
    return CellRecord(
        cell_id=obj["cell_id"],
        patient_id=obj["patient_id"],
        phase_contrast_path=_opt_path(obj["phase_contrast"], base),
        bright_field_path=_opt_path(obj.get("bright_field"), base),
        fluorescence_path=_opt_path(obj.get("fluorescence"), base),
        annotations=annotations,
    )


def load_manifest(path, pixel_scale_um: float | None = None, primary_round: str | None = None) -> Manifest:
    """Read and validate a line-delimited JSON manifest.

    Args:
        path: manifest file.
        pixel_scale_um: overrides the header value (default 1.0 when neither is given).
        primary_round: overrides the header value; otherwise the first round
            seen in the file, or ``round_1`` for an unannotated manifest.

    Raises:
        ManifestError: on a parse error (with line number), duplicate cell ids,
            or a record without a phase-contrast path.
    """
    path = Path(path)
    base = path.parent
    header: dict = {}
    records: list[CellRecord] = []
    seen: dict[str, int] = {}
    first_round = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: expected a JSON object")
            if "cell_id" not in obj:
                if records or header:
                    raise ManifestError(f"{path}:{lineno}: record without cell_id")
                header = obj
                continue
            try:
                rec = _parse_record(obj, base)
            except ManifestError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            if rec.cell_id in seen:
                raise ManifestError(
                    f"{path}:{lineno}: duplicate cell_id {rec.cell_id!r} (first on line {seen[rec.cell_id]})"
                )
            seen[rec.cell_id] = lineno
            if first_round is None and rec.annotations:
                first_round = next(iter(rec.annotations))
            records.append(rec)

    scale = pixel_scale_um if pixel_scale_um is not None else header.get("pixel_scale_um", 1.0)
    rnd = primary_round or header.get("primary_round") or first_round or DEFAULT_ROUND
    try:
        return Manifest(records=tuple(records), pixel_scale_um=float(scale), primary_round=rnd)
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from None


def write_manifest(manifest: Manifest, path) -> Path:
    """Write ``manifest`` with a settings header; paths are stored relative to the file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"pixel_scale_um": manifest.pixel_scale_um,
                             "primary_round": manifest.primary_round}) + "\n")
        for rec in manifest.records:
            rec_abs = replace(
                rec,
                phase_contrast_path=Path(rec.phase_contrast_path).resolve(),
                bright_field_path=None if rec.bright_field_path is None else Path(rec.bright_field_path).resolve(),
                fluorescence_path=None if rec.fluorescence_path is None else Path(rec.fluorescence_path).resolve(),
            )
            fh.write(json.dumps(rec_abs.to_json(base)) + "\n")
    return path


def filter_supervised(manifest: Manifest, round_id: str | None = None) -> Manifest:
    """Keep only records labelled FRAGMENTED or UNFRAGMENTED in ``round_id``."""
    round_id = round_id or manifest.primary_round
    missing = sum(1 for r in manifest.records if round_id not in r.annotations)
    if missing:
        logger.warning("%d record(s) lack round %r and were dropped", missing, round_id)
    return manifest.with_records(r for r in manifest.records if r.label(round_id) is not Label.NULL)


def class_counts(manifest: Manifest, round_id: str | None = None) -> tuple[int, int, int]:
    """Return ``(unfragmented, fragmented, null)``; records missing the round count as null."""
    round_id = round_id or manifest.primary_round
    counts = {label: 0 for label in Label}
    for rec in manifest.records:
        counts[rec.label(round_id)] += 1
    return counts[Label.UNFRAGMENTED], counts[Label.FRAGMENTED], counts[Label.NULL]


def grouped_split(manifest: Manifest, val_patient_count: int, seed: int) -> SplitManifest:
    """Assign whole patients to validation so no patient contributes to both sets.

    The assignment depends only on the sorted patient ids and ``seed``.
    """
    patients = manifest.patients
    if not isinstance(val_patient_count, int) or not 0 < val_patient_count < len(patients):
        raise SplitError(
            f"val_patient_count must satisfy 0 < n < {len(patients)} (distinct patients), "
            f"got {val_patient_count}"
        )
    rng = random.Random(seed)
    val = rng.sample(patients, val_patient_count)
    return SplitManifest(
        train_patients=frozenset(patients) - frozenset(val),
        val_patients=frozenset(val),
        seed=seed,
    )


def save_split(split: SplitManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(split.to_json(), indent=2) + "\n", encoding="utf-8")
    return path


def load_split(path) -> SplitManifest:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SplitError(f"{path}: invalid JSON ({exc.msg})") from None
    return SplitManifest.from_json(obj)
