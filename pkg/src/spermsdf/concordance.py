"""Intra-annotator concordance between two annotation rounds of one manifest."""
from __future__ import annotations

import json
import logging
import statistics
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import Label, Manifest

logger = logging.getLogger(__name__)


class ConcordanceError(ValueError):
    pass


@dataclass(frozen=True)
class PatientSDF:
    patient_id: str
    sdf_round_a: float
    sdf_round_b: float
    abs_diff: float


@dataclass
class ConcordanceReport:
    round_a: str
    round_b: str
    n_cells_compared: int
    percent_agreement: float
    cohen_kappa: float
    per_patient: list[PatientSDF] = field(default_factory=list)
    mean_abs_diff: float = 0.0
    std_abs_diff: float = 0.0
    three_way: bool = True

    def to_json(self) -> dict:
        return asdict(self)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")
        return path

    def summary(self) -> str:
        """Headline figures in the style ``agreed on 81%`` / ``13.7%``."""
        return (
            f"Per-cell agreement: {format_percent(self.percent_agreement, 0)} "
            f"of {self.n_cells_compared} cells (Cohen's kappa {self.cohen_kappa:.2f})\n"
            f"Per-patient SDF% absolute difference: mean {self.mean_abs_diff:.1f}%, "
            f"standard deviation {self.std_abs_diff:.1f}%"
        )

    def table(self) -> str:
        lines = [f"{'patient':<16}{self.round_a:>12}{self.round_b:>12}{'|diff|':>10}"]
        for p in self.per_patient:
            lines.append(f"{p.patient_id:<16}{p.sdf_round_a:>11.1f}%{p.sdf_round_b:>11.1f}%{p.abs_diff:>9.1f}%")
        return "\n".join(lines + ["", self.summary()])


def format_percent(fraction: float, decimals: int = 1) -> str:
    return f"{100 * fraction:.{decimals}f}%"


def cohen_kappa(a: list, b: list) -> float:
    """Cohen's kappa for two equal-length label sequences.

    Returns 1.0 when both raters use a single identical category (no chance
    disagreement is possible).
    """
    n = len(a)
    if n == 0 or n != len(b):
        raise ValueError("kappa needs two non-empty sequences of equal length")
    observed = sum(x == y for x, y in zip(a, b)) / n
    ca, cb = Counter(a), Counter(b)
    expected = sum(ca[k] * cb[k] for k in ca) / (n * n)
    if expected == 1.0:
        return 1.0
    return (observed - expected) / (1 - expected)


def per_cell_agreement(manifest: Manifest, round_a: str, round_b: str,
                       three_way: bool = True) -> tuple[float, float, int]:
    """``(percent_agreement, cohen_kappa, n)`` over cells annotated in both rounds.

    With ``three_way=False`` cells marked null in either round are also excluded.
    """
    pairs = []
    for rec in manifest.records:
        if round_a not in rec.annotations or round_b not in rec.annotations:
            continue
        la, lb = rec.annotations[round_a], rec.annotations[round_b]
        if not three_way and Label.NULL in (la, lb):
            continue
        pairs.append((la.value, lb.value))
    if not pairs:
        raise ConcordanceError(f"no cells annotated in both {round_a!r} and {round_b!r}")
    a, b = zip(*pairs)
    agree = sum(x == y for x, y in pairs) / len(pairs)
    return agree, cohen_kappa(list(a), list(b)), len(pairs)


def patient_sdf(manifest: Manifest, round_id: str) -> dict[str, float]:
    """Per-patient percentage of fragmented cells among non-null annotations."""
    frag: Counter = Counter()
    total: Counter = Counter()
    patients = set()
    for rec in manifest.records:
        patients.add(rec.patient_id)
        label = rec.label(round_id)
        if label is Label.NULL:
            continue
        total[rec.patient_id] += 1
        frag[rec.patient_id] += label is Label.FRAGMENTED
    omitted = sorted(patients - set(total))
    if omitted:
        logger.warning("round %r: %d patient(s) without non-null cells omitted: %s",
                       round_id, len(omitted), ", ".join(omitted[:5]))
    return {p: 100.0 * frag[p] / total[p] for p in sorted(total)}


def sdf_difference_stats(manifest: Manifest, round_a: str, round_b: str,
                         three_way: bool = True) -> ConcordanceReport:
    """Full concordance report: per-cell agreement plus per-patient SDF% differences.

    The spread of absolute differences is the sample standard deviation
    (n - 1 denominator); it is 0 for a single patient.
    """
    sdf_a = patient_sdf(manifest, round_a)
    sdf_b = patient_sdf(manifest, round_b)
    common = sorted(set(sdf_a) & set(sdf_b))
    if not common:
        raise ConcordanceError(f"no patient has non-null cells in both {round_a!r} and {round_b!r}")
    rows = [PatientSDF(p, sdf_a[p], sdf_b[p], abs(sdf_a[p] - sdf_b[p])) for p in common]
    diffs = [r.abs_diff for r in rows]
    agree, kappa, n = per_cell_agreement(manifest, round_a, round_b, three_way)
    return ConcordanceReport(
        round_a=round_a,
        round_b=round_b,
        n_cells_compared=n,
        percent_agreement=agree,
        cohen_kappa=kappa,
        per_patient=rows,
        mean_abs_diff=statistics.fmean(diffs),
        std_abs_diff=statistics.stdev(diffs) if len(diffs) > 1 else 0.0,
        three_way=three_way,
    )
