"""Binary classification metrics with FRAGMENTED (1) as the positive class.

Covers the confusion matrix, a per-class classification report, exact
(Clopper-Pearson) or Wilson intervals for proportion metrics, a ROC sweep
with trapezoid AUC, and plot/JSON emission.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

Z_95 = 1.96
CLASS_NAMES = ("unfragmented", "fragmented")
JSON_DECIMALS = 6


@dataclass(frozen=True)
class ConfusionMatrix:
    tn: int
    fp: int
    fn: int
    tp: int

    def __post_init__(self):
        for name in ("tn", "fp", "fn", "tp"):
            value = getattr(self, name)
            if int(value) != value or value < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {value}")
            object.__setattr__(self, name, int(value))

    @property
    def total(self) -> int:
        return self.tn + self.fp + self.fn + self.tp

    def as_array(self) -> np.ndarray:
        """Rows are true class (0, 1), columns predicted class."""
        return np.array([[self.tn, self.fp], [self.fn, self.tp]])


def _binary(values, name) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0 and 1")
    return arr.astype(int)


def confusion(labels, predictions) -> ConfusionMatrix:
    y = _binary(labels, "labels")
    p = _binary(predictions, "predictions")
    if len(y) != len(p):
        raise ValueError(f"length mismatch: {len(y)} labels vs {len(p)} predictions")
    if len(y) == 0:
        raise ValueError("empty input")
    tp = int(np.sum((y == 1) & (p == 1)))
    tn = int(np.sum((y == 0) & (p == 0)))
    fp = int(np.sum((y == 0) & (p == 1)))
    fn = int(np.sum((y == 1) & (p == 0)))
    return ConfusionMatrix(tn=tn, fp=fp, fn=fn, tp=tp)


def wilson_ci(successes: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n < 1 or not 0 <= successes <= n:
        raise ValueError(f"invalid counts: successes={successes}, n={n}")
    if confidence == 0.95:
        z = Z_95
    else:
        from scipy.stats import norm
        z = float(norm.ppf(0.5 + confidence / 2))
    p = successes / n
    denom = 1 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    lo, hi = center - half, center + half
    # exact endpoints at the boundaries, and p-hat always inside despite rounding
    lo = 0.0 if successes == 0 else min(max(lo, 0.0), p)
    hi = 1.0 if successes == n else max(min(hi, 1.0), p)
    return lo, hi


def clopper_pearson_ci(successes: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    """Exact (beta-quantile) binomial interval; the default for reports."""
    from scipy.stats import beta

    if n < 1 or not 0 <= successes <= n:
        raise ValueError(f"invalid counts: successes={successes}, n={n}")
    alpha = 1 - confidence
    lo = 0.0 if successes == 0 else float(beta.ppf(alpha / 2, successes, n - successes + 1))
    hi = 1.0 if successes == n else float(beta.ppf(1 - alpha / 2, successes + 1, n - successes))
    return lo, hi


CI_METHODS = {"clopper-pearson": clopper_pearson_ci, "wilson": wilson_ci}
DEFAULT_CI_METHOD = "clopper-pearson"


def _ratio(num: int, den: int, undefined: list, name: str) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def _f1(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class ProportionMetric:
    value: float
    ci_low: float | None = None
    ci_high: float | None = None


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    per_class: dict[str, ClassMetrics]
    accuracy: float
    macro_avg: ClassMetrics
    weighted_avg: ClassMetrics
    sensitivity: ProportionMetric
    specificity: ProportionMetric
    precision: ProportionMetric
    accuracy_ci: ProportionMetric
    f1: float
    undefined: list[str] = field(default_factory=list)
    threshold: float = 0.5
    ci_method: str = DEFAULT_CI_METHOD
    roc_points: list[tuple[float, float, float]] = field(default_factory=list)
    auc: float | None = None

    def to_json(self) -> dict:
        def rnd(obj):
            if isinstance(obj, float):
                return obj if math.isinf(obj) else round(obj, JSON_DECIMALS)
            if isinstance(obj, dict):
                return {k: rnd(v) for k, v in obj.items()}
            if isinstance(obj, (list, tuple)):
                return [rnd(v) for v in obj]
            return obj

        d = asdict(self)
        d["roc_points"] = [[fpr, tpr, "inf" if math.isinf(t) else t] for fpr, tpr, t in self.roc_points]
        return rnd(d)

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        return cls(
            confusion=ConfusionMatrix(**d["confusion"]),
            per_class={k: ClassMetrics(**v) for k, v in d["per_class"].items()},
            accuracy=d["accuracy"],
            macro_avg=ClassMetrics(**d["macro_avg"]),
            weighted_avg=ClassMetrics(**d["weighted_avg"]),
            sensitivity=ProportionMetric(**d["sensitivity"]),
            specificity=ProportionMetric(**d["specificity"]),
            precision=ProportionMetric(**d["precision"]),
            accuracy_ci=ProportionMetric(**d["accuracy_ci"]),
            f1=d["f1"],
            undefined=list(d.get("undefined", [])),
            threshold=d.get("threshold", 0.5),
            ci_method=d.get("ci_method", DEFAULT_CI_METHOD),
            roc_points=[(fpr, tpr, math.inf if t == "inf" else t) for fpr, tpr, t in d.get("roc_points", [])],
            auc=d.get("auc"),
        )

    def rounded(self) -> "EvalReport":
        """The report as it reads back from ``report.json``."""
        return EvalReport.from_json(json.loads(json.dumps(self.to_json())))


def report(cm: ConfusionMatrix, confidence: float = 0.95, ci_method: str = DEFAULT_CI_METHOD) -> EvalReport:
    """Classification report and CI-bearing proportion metrics for ``cm``.

    Zero-denominator ratios are reported as 0 and named in ``undefined``.
    ``ci_method`` is ``"clopper-pearson"`` (exact) or ``"wilson"``.
    """
    if ci_method not in CI_METHODS:
        raise ValueError(f"unknown ci_method {ci_method!r}; choose from {sorted(CI_METHODS)}")
    interval = CI_METHODS[ci_method]
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")
    undefined: list[str] = []
    prec1 = _ratio(cm.tp, cm.tp + cm.fp, undefined, "precision_fragmented")
    rec1 = _ratio(cm.tp, cm.tp + cm.fn, undefined, "recall_fragmented")
    prec0 = _ratio(cm.tn, cm.tn + cm.fn, undefined, "precision_unfragmented")
    rec0 = _ratio(cm.tn, cm.tn + cm.fp, undefined, "recall_unfragmented")
    per_class = {
        "unfragmented": ClassMetrics(prec0, rec0, _f1(prec0, rec0), cm.tn + cm.fp),
        "fragmented": ClassMetrics(prec1, rec1, _f1(prec1, rec1), cm.tp + cm.fn),
    }
    accuracy = (cm.tp + cm.tn) / cm.total
    classes = list(per_class.values())
    macro = ClassMetrics(
        precision=sum(c.precision for c in classes) / 2,
        recall=sum(c.recall for c in classes) / 2,
        f1=sum(c.f1 for c in classes) / 2,
        support=cm.total,
    )
    weighted = ClassMetrics(
        precision=sum(c.precision * c.support for c in classes) / cm.total,
        recall=sum(c.recall * c.support for c in classes) / cm.total,
        f1=sum(c.f1 * c.support for c in classes) / cm.total,
        support=cm.total,
    )

    def prop(successes, n, value):
        if n == 0:
            return ProportionMetric(value)
        return ProportionMetric(value, *interval(successes, n, confidence))

    return EvalReport(
        confusion=cm,
        per_class=per_class,
        accuracy=accuracy,
        macro_avg=macro,
        weighted_avg=weighted,
        sensitivity=prop(cm.tp, cm.tp + cm.fn, rec1),
        specificity=prop(cm.tn, cm.tn + cm.fp, rec0),
        precision=prop(cm.tp, cm.tp + cm.fp, prec1),
        accuracy_ci=prop(cm.tp + cm.tn, cm.total, accuracy),
        f1=per_class["fragmented"].f1,
        undefined=undefined,
        ci_method=ci_method,
    )


def roc(labels, scores) -> tuple[list[tuple[float, float, float]], float]:
    """ROC points ``(fpr, tpr, threshold)`` and trapezoid AUC.

    Each unique score is a threshold (predict positive when score >= t),
    swept from high to low after the (0, 0) point at t = +inf. Tied scores
    move both rates at once, so the trapezoid area counts ties as one half.
    """
    y = _binary(labels, "labels")
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != y.shape:
        raise ValueError("labels and scores must have equal length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes present")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    distinct = np.r_[np.nonzero(np.diff(s_sorted))[0], len(s_sorted) - 1]
    tps = np.cumsum(y_sorted)[distinct]
    fps = (distinct + 1) - tps
    points = [(0.0, 0.0, math.inf)]
    points += [(fp / n_neg, tp / n_pos, float(t)) for fp, tp, t in zip(fps, tps, s_sorted[distinct])]
    # integer trapezoid sum keeps the area exact up to one final division
    tps_all = np.r_[0, tps].astype(np.int64)
    fps_all = np.r_[0, fps].astype(np.int64)
    twice_area = int(np.sum(np.diff(fps_all) * (tps_all[1:] + tps_all[:-1])))
    return points, twice_area / (2 * n_pos * n_neg)


def evaluate_predictions(labels, scores, threshold: float = 0.5, ci_method: str = DEFAULT_CI_METHOD) -> EvalReport:
    """Full report from probabilities: hard predictions at ``threshold`` plus ROC."""
    y = _binary(labels, "labels")
    s = np.asarray(scores, dtype=np.float64)
    rep = report(confusion(y, (s >= threshold).astype(int)), ci_method=ci_method)
    rep.threshold = threshold
    if 0 < y.sum() < len(y):
        rep.roc_points, rep.auc = roc(y, s)
    else:
        logger.warning("single-class evaluation set; ROC/AUC omitted")
    return rep


def format_report(rep: EvalReport) -> str:
    """Plain-text classification report and CI table."""
    lines = [f"{'class':<18}{'precision':>10}{'recall':>10}{'f1-score':>10}{'support':>9}"]
    for i, name in enumerate(CLASS_NAMES):
        c = rep.per_class[name]
        lines.append(f"{name.capitalize() + f' ({i})':<18}{c.precision:>10.2f}{c.recall:>10.2f}{c.f1:>10.2f}{c.support:>9d}")
    lines.append(f"{'accuracy':<18}{'':>10}{'':>10}{rep.accuracy:>10.2f}{rep.confusion.total:>9d}")
    for label, c in (("macro avg", rep.macro_avg), ("weighted avg", rep.weighted_avg)):
        lines.append(f"{label:<18}{c.precision:>10.2f}{c.recall:>10.2f}{c.f1:>10.2f}{c.support:>9d}")
    lines.append("")
    for label, m in (("Sensitivity (Recall)", rep.sensitivity), ("Specificity", rep.specificity),
                     ("Precision", rep.precision), ("Accuracy", rep.accuracy_ci)):
        ci = f" ({m.ci_low:.2f} - {m.ci_high:.2f})" if m.ci_low is not None else ""
        lines.append(f"{label:<22}{m.value:.2f}{ci}")
    lines.append(f"{'F1-Score':<22}{rep.f1:.2f}")
    if rep.auc is not None:
        lines.append(f"{'AUC':<22}{rep.auc:.3f}")
    return "\n".join(lines)


def emit_plots(rep: EvalReport, logs, out_dir, title: str = "") -> list[Path]:
    """Write ``confusion.png``, ``roc.png``, ``learning_curves.png`` and ``report.json``.

    The learning-curve plot is skipped (with a warning) when ``logs`` is empty.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    prefix = f"{title} " if title else ""

    path = out / "report.json"
    path.write_text(json.dumps(rep.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(path)

    fig, ax = plt.subplots(figsize=(4.5, 4))
    mat = rep.confusion.as_array()
    ax.imshow(mat, cmap="Blues")
    for (i, j), v in np.ndenumerate(mat):
        ax.text(j, i, str(v), ha="center", va="center",
                color="white" if v > mat.max() / 2 else "black")
    ax.set_xticks([0, 1], ["Unfragmented", "Fragmented"])
    ax.set_yticks([0, 1], ["Unfragmented", "Fragmented"])
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    ax.set_title(f"{prefix}Confusion Matrix")
    fig.tight_layout()
    fig.savefig(out / "confusion.png", dpi=120)
    plt.close(fig)
    written.append(out / "confusion.png")

    fig, ax = plt.subplots(figsize=(4.5, 4))
    if rep.roc_points:
        fpr = [p[0] for p in rep.roc_points] + [1.0]
        tpr = [p[1] for p in rep.roc_points] + [1.0]
        ax.plot(fpr, tpr, label=f"AUC = {rep.auc:.3f}")
        ax.legend(loc="lower right")
    ax.plot([0, 1], [0, 1], "k--", lw=0.8)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(f"{prefix}ROC Curve")
    fig.tight_layout()
    fig.savefig(out / "roc.png", dpi=120)
    plt.close(fig)
    written.append(out / "roc.png")

    logs = list(logs or [])
    if not logs:
        logger.warning("no epoch logs; learning_curves.png skipped")
    else:
        epochs = [l.epoch for l in logs]
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
        a1.plot(epochs, [l.train_loss for l in logs], label="train")
        a1.plot(epochs, [l.val_loss for l in logs], label="validation")
        a1.set_xlabel("epoch")
        a1.set_ylabel("loss")
        a1.legend()
        a2.plot(epochs, [l.train_acc for l in logs], label="train")
        a2.plot(epochs, [l.val_acc for l in logs], label="validation")
        a2.set_xlabel("epoch")
        a2.set_ylabel("accuracy")
        a2.legend()
        fig.suptitle(f"{prefix}Learning Curves")
        fig.tight_layout()
        fig.savefig(out / "learning_curves.png", dpi=120)
        plt.close(fig)
        written.append(out / "learning_curves.png")
    return written


def load_report(path) -> EvalReport:
    return EvalReport.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
