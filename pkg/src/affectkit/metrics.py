"""Competition scoring: confusion matrices, F1, CCC and the MTL/LSD criteria.

Every score is computed in 64-bit without gradient tracking. Precision,
recall and F1 map 0/0 to 0, and macro averages always divide by the full
class count, so a class that never occurs contributes 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .schema import AU_NAMES, AU_UNLABELED, EXPR_UNLABELED, LSD_CLASSES, MTL_CLASSES, VA_UNLABELED

logger = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, columns = predicted class

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def confusion(labels, preds, num_classes: int) -> ConfusionMatrix:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    if labels.shape != preds.shape:
        raise ValueError(f"{labels.size} labels vs {preds.size} predictions")
    for name, arr in (("label", labels), ("prediction", preds)):
        bad = (arr < 0) | (arr >= num_classes)
        if bad.any():
            raise ValueError(f"{name} index {int(arr[bad][0])} outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


def f1_scores(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class F1 and their unweighted mean over all classes."""
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    precision = _safe_ratio(tp, c.sum(axis=0))
    recall = _safe_ratio(tp, c.sum(axis=1))
    f1 = _safe_ratio(2 * precision * recall, precision + recall)
    return f1, macro_average(f1)


def macro_average(per_class) -> float:
    per_class = np.asarray(per_class, dtype=np.float64)
    return float(per_class.sum() / per_class.size)


def binary_f1(labels, preds) -> float:
    labels = np.asarray(labels).reshape(-1)
    preds = np.asarray(preds).reshape(-1)
    if labels.shape != preds.shape:
        raise ValueError(f"{labels.size} labels vs {preds.size} predictions")
    for arr in (labels, preds):
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("binary_f1 expects 0/1 values")
    tp = float(np.sum((labels == 1) & (preds == 1)))
    fp = float(np.sum((labels == 0) & (preds == 1)))
    fn = float(np.sum((labels == 1) & (preds == 0)))
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def ccc_metric(pred, truth) -> float:
    """CCC in 64-bit, same convention as the training loss (population moments, 1e-8 stabiliser)."""
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(truth, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"ccc sequences differ in length: {p.size} vs {t.size}")
    if p.size < 2:
        raise ValueError("ccc needs at least two points")
    mp, mt = p.mean(), t.mean()
    dp, dt = p - mp, t - mt
    cov = np.mean(dp * dt)
    return float(2 * cov / (np.mean(dp * dp) + np.mean(dt * dt) + (mp - mt) ** 2 + 1e-8))


def aggregate_mtl(p_va: float, p_expr: float, p_au: float) -> float:
    return p_va + p_expr + p_au


@dataclass
class MetricReport:
    p_va: float
    p_expr: float
    p_au: float
    p_mtl: float
    ccc_v: float
    ccc_a: float
    per_class_f1: list[tuple[str, float]]
    per_au_f1: list[tuple[str, float]]
    counts_scored: dict[str, int]
    warnings: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            "task=mtl",
            f"p_mtl={self.p_mtl:.6f}",
            f"p_va={self.p_va:.6f}",
            f"p_expr={self.p_expr:.6f}",
            f"p_au={self.p_au:.6f}",
            f"ccc_v={self.ccc_v:.6f}",
            f"ccc_a={self.ccc_a:.6f}",
        ]
        lines += [f"f1.{name}={v:.6f}" for name, v in self.per_class_f1]
        lines += [f"au_f1.{name}={v:.6f}" for name, v in self.per_au_f1]
        lines += [f"n.{k}={v}" for k, v in self.counts_scored.items()]
        lines += [f"warning={w}" for w in self.warnings]
        return "\n".join(lines) + "\n"


@dataclass
class LSDReport:
    p_lsd: float
    per_class_f1: list[tuple[str, float]]
    count: int
    warnings: list[str] = field(default_factory=list)

    @property
    def macro_f1(self) -> float:
        return self.p_lsd

    def to_text(self) -> str:
        lines = ["task=lsd", f"p_lsd={self.p_lsd:.6f}"]
        lines += [f"f1.{name}={v:.6f}" for name, v in self.per_class_f1]
        lines.append(f"n.expr={self.count}")
        lines += [f"warning={w}" for w in self.warnings]
        return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict[str, str]:
    """Read a report produced by ``to_text`` back into an ordered key/value dict."""
    out: dict[str, str] = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key] = value if key not in out else out[key] + ";" + value
    return out


def evaluate_mtl(records, expr_pred, va_pred, au_pred) -> MetricReport:
    """Score MTL predictions, each task on the subset labelled for it.

    ``records`` supplies ground truth (``valence``, ``arousal``,
    ``expression``, ``aus``); predictions are class indices [N], VA values
    [N, 2] and binary AUs [N, 12].
    """
    n = len(records)
    expr_pred = np.asarray(expr_pred).reshape(n)
    va_pred = np.asarray(va_pred, dtype=np.float64).reshape(n, 2)
    au_pred = np.asarray(au_pred).reshape(n, len(AU_NAMES))
    val = np.array([r.valence for r in records], dtype=np.float64)
    aro = np.array([r.arousal for r in records], dtype=np.float64)
    expr = np.array([r.expression for r in records], dtype=np.int64)
    aus = np.array([r.aus for r in records], dtype=np.int64).reshape(n, len(AU_NAMES))
    warnings: list[str] = []

    va_ok = (val != VA_UNLABELED) & (aro != VA_UNLABELED)
    if va_ok.sum() >= 2:
        ccc_v = ccc_metric(va_pred[va_ok, 0], val[va_ok])
        ccc_a = ccc_metric(va_pred[va_ok, 1], aro[va_ok])
    else:
        ccc_v = ccc_a = 0.0
        warnings.append("va:insufficient-labels")
    p_va = (ccc_v + ccc_a) / 2

    ex_ok = expr != EXPR_UNLABELED
    if ex_ok.any():
        per_class, p_expr = f1_scores(confusion(expr[ex_ok], expr_pred[ex_ok], len(MTL_CLASSES)))
    else:
        per_class, p_expr = np.zeros(len(MTL_CLASSES)), 0.0
        warnings.append("expr:no-labels")

    au_f1 = np.zeros(len(AU_NAMES))
    au_counts = {}
    for i, name in enumerate(AU_NAMES):
        ok = aus[:, i] != AU_UNLABELED
        au_counts[name] = int(ok.sum())
        if ok.any():
            au_f1[i] = binary_f1(aus[ok, i], au_pred[ok, i])
    if not any(au_counts.values()):
        warnings.append("au:no-labels")
    p_au = macro_average(au_f1)

    for w in warnings:
        logger.warning("evaluate_mtl: %s", w)
    return MetricReport(
        p_va=p_va,
        p_expr=p_expr,
        p_au=p_au,
        p_mtl=aggregate_mtl(p_va, p_expr, p_au),
        ccc_v=ccc_v,
        ccc_a=ccc_a,
        per_class_f1=list(zip(MTL_CLASSES, per_class.tolist())),
        per_au_f1=list(zip(AU_NAMES, au_f1.tolist())),
        counts_scored={"va": int(va_ok.sum()), "expr": int(ex_ok.sum()), "au": int(sum(au_counts.values()))},
        warnings=warnings,
    )


def evaluate_lsd(labels, preds) -> LSDReport:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    per_class, macro = f1_scores(confusion(labels, preds, len(LSD_CLASSES)))
    warnings = [] if labels.size else ["expr:no-labels"]
    return LSDReport(macro, list(zip(LSD_CLASSES, per_class.tolist())), int(labels.size), warnings)
