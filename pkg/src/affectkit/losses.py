"""Differentiable batch losses for the three affect tasks.

All classification losses take probabilities, not logits: the ensemble code
averages softmax outputs, so probabilities are the common currency. Logs are
clamped at 1e-12. Per-sample losses are averaged over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .numkit import Tensor

LOG_FLOOR = 1e-12
CCC_DELTA = 1e-8


@dataclass(frozen=True)
class SmoothingConfig:
    epsilon: float
    num_classes: int

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"smoothing epsilon must lie in [0, 1), got {self.epsilon}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be positive, got {self.num_classes}")

    def targets(self, labels) -> np.ndarray:
        """Smoothed target rows, float64, shape [B, C]."""
        labels = np.asarray(labels, dtype=np.intp)
        c = self.num_classes
        q = np.full((labels.size, c), self.epsilon / c)
        q[np.arange(labels.size), labels] += 1.0 - self.epsilon
        return q


@dataclass(frozen=True)
class LossBreakdown:
    l_expr: float
    l_va: float
    l_au: float
    total: float


def _check_probs(probs: Tensor, labels, num_weights: int | None) -> np.ndarray:
    if probs.ndim != 2:
        raise nk.ShapeError(f"probs must be [B, C], got {probs.shape}")
    b, c = probs.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise nk.ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c}): {labels.tolist()}")
    if num_weights is not None and num_weights != c:
        raise ValueError(f"{num_weights} class weights for {c} classes")
    return labels.astype(np.intp)


def weighted_cross_entropy(probs: Tensor, labels, weights=None) -> Tensor:
    """Mean over the batch of ``-w[y] * log p[y]``."""
    w = None if weights is None else np.asarray(weights, dtype=np.float64)
    labels = _check_probs(probs, labels, None if w is None else w.size)
    logp = nk.log(nk.gather(probs, labels), LOG_FLOOR)
    if w is not None:
        logp = nk.mul(logp, Tensor(w[labels], dtype=probs.dtype))
    return nk.neg(nk.mean(logp))


def smoothed_cross_entropy(probs: Tensor, labels, cfg: SmoothingConfig, weights=None) -> Tensor:
    """Cross-entropy against ``(1 - eps) * onehot + eps / C``.

    Optional class weights scale each class term. With ``eps == 0`` this
    dispatches to :func:`weighted_cross_entropy`, so the two agree bit for bit.
    """
    w = None if weights is None else np.asarray(weights, dtype=np.float64)
    labels = _check_probs(probs, labels, None if w is None else w.size)
    if probs.shape[1] != cfg.num_classes:
        raise ValueError(f"smoothing configured for {cfg.num_classes} classes, probs have {probs.shape[1]}")
    if cfg.epsilon == 0.0:
        return weighted_cross_entropy(probs, labels, w)
    q = cfg.targets(labels)
    if w is not None:
        q = q * w[None, :]
    terms = nk.mul(nk.log(probs, LOG_FLOOR), Tensor(q, dtype=probs.dtype))
    return nk.neg(nk.scale(nk.sum_(terms), 1.0 / probs.shape[0]))


def ccc(pred: Tensor, truth) -> Tensor:
    """Concordance correlation coefficient with population moments.

    A 1e-8 term in the denominator makes constant sequences score 0.
    """
    truth = truth if isinstance(truth, Tensor) else Tensor(truth, dtype=pred.dtype)
    if pred.ndim != 1 or pred.shape != truth.shape:
        raise nk.ShapeError(f"ccc needs equal-length sequences, got {pred.shape} and {truth.shape}")
    if pred.size < 2:
        raise ValueError("ccc needs at least two points")
    mp = nk.mean(pred)
    mt = nk.mean(truth)
    dp = nk.sub(pred, mp)
    dt = nk.sub(truth, mt)
    cov = nk.mean(nk.mul(dp, dt))
    var_p = nk.mean(nk.mul(dp, dp))
    var_t = nk.mean(nk.mul(dt, dt))
    shift = nk.sub(mp, mt)
    denom = nk.add(nk.add(nk.add(var_p, var_t), nk.mul(shift, shift)), CCC_DELTA)
    return nk.div(nk.scale(cov, 2.0), denom)


def va_loss(pred_v: Tensor, truth_v, pred_a: Tensor, truth_a) -> Tensor:
    """``(1 - CCC_valence) + (1 - CCC_arousal)``, in [0, 4]."""
    sizes = {pred_v.size, pred_a.size, np.size(_raw(truth_v)), np.size(_raw(truth_a))}
    if len(sizes) != 1:
        raise nk.ShapeError("va_loss: all four sequences must have the same length")
    cv = ccc(pred_v, truth_v)
    ca = ccc(pred_a, truth_a)
    return nk.add(nk.neg(nk.add(cv, ca)), 2.0)


def _raw(x):
    return x.data if isinstance(x, Tensor) else x


def weighted_bce(probs: Tensor, labels, pos_weights=None, mask=None) -> Tensor:
    """Mean over samples of ``-sum_i [w_i y_i log p_i + (1 - y_i) log(1 - p_i)]``.

    The weight multiplies only the positive term. ``mask`` (same shape as
    labels, 1 = labelled) drops entries; the batch mean then runs over rows
    with at least one labelled entry. Labels must already be 0/1 everywhere,
    masked entries included.
    """
    if probs.ndim != 2:
        raise nk.ShapeError(f"probs must be [B, U], got {probs.shape}")
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != probs.shape:
        raise nk.ShapeError(f"labels shape {y.shape} vs probs {probs.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("weighted_bce labels must be binary; mask unlabeled entries first")
    u = probs.shape[1]
    w = np.ones(u) if pos_weights is None else np.asarray(pos_weights, dtype=np.float64)
    if w.shape != (u,):
        raise ValueError(f"{w.size} positive weights for {u} outputs")
    m = np.ones_like(y) if mask is None else np.asarray(mask, dtype=np.float64)
    rows = int(np.count_nonzero(m.any(axis=1)))
    if rows == 0:
        return Tensor(0.0, dtype=probs.dtype)
    dt = probs.dtype
    pos = nk.mul(nk.log(probs, LOG_FLOOR), Tensor(m * y * w[None, :], dtype=dt))
    negp = nk.mul(nk.log(nk.add(nk.neg(probs), 1.0), LOG_FLOOR), Tensor(m * (1.0 - y), dtype=dt))
    return nk.neg(nk.scale(nk.sum_(nk.add(pos, negp)), 1.0 / rows))


def mtl_total(l_expr: Tensor, l_va: Tensor, l_au: Tensor) -> tuple[Tensor, LossBreakdown]:
    """Unweighted sum of the three task losses plus a float breakdown for logging."""
    parts = {"expr": l_expr, "va": l_va, "au": l_au}
    parts = {k: t if isinstance(t, Tensor) else Tensor(t) for k, t in parts.items()}
    l_expr, l_va, l_au = parts.values()
    for name, t in parts.items():
        if not math.isfinite(t.item()):
            raise FloatingPointError(f"non-finite {name} loss: {t.item()}")
    total = nk.add(nk.add(l_expr, l_va), l_au)
    vals = [t.item() for t in parts.values()]
    return total, LossBreakdown(*vals, total=total.item())
