"""Finite-difference verification of the analytic gradients.

The oracle only ever calls the forward pass: every parameter element is
nudged by +/-eps and the loss re-evaluated in 64-bit. The analytic side is
one tape backward pass, also in 64-bit, so the comparison isolates the
backward rules from storage rounding.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import losses as L
from . import numkit as nk
from .model import BackboneConfig, MultiHeadModel, backbone_forward, deviation_forward, multi_slot_forward
from .numkit import Tensor

TOLERANCE = 1e-3
ABS_FLOOR = 1e-5
SUITES = ("losses", "backbone", "heads", "deviation", "full")

LossFn = Callable[[Mapping[str, Tensor]], Tensor]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> float:
    """Max element-wise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den))


def numeric_gradients(fn: LossFn, arrays: Mapping[str, np.ndarray], eps: float = 1e-3) -> dict[str, np.ndarray]:
    """Central differences of ``fn`` w.r.t. every element of every array."""
    with nk.precision(np.float64):
        base = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}

        def evaluate() -> float:
            return fn({k: Tensor(v) for k, v in base.items()}).item()

        out = {}
        for name, arr in base.items():
            g = np.zeros_like(arr)
            flat, gflat = arr.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = evaluate()
                flat[i] = orig - eps
                down = evaluate()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * eps)
            out[name] = g
    return out


def analytic_gradients(fn: LossFn, arrays: Mapping[str, np.ndarray], dtype=np.float64) -> dict[str, np.ndarray]:
    with nk.precision(dtype):
        leaves = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        with nk.Tape() as tape:
            loss = fn(leaves)
        tape.backward(loss)
    return {k: t.grad if t.grad is not None else np.zeros_like(t.data) for k, t in leaves.items()}


def compare(fn: LossFn, arrays: Mapping[str, np.ndarray], eps: float = 1e-3) -> dict[str, float]:
    a = analytic_gradients(fn, arrays)
    n = numeric_gradients(fn, arrays, eps)
    return {k: relative_error(a[k], n[k]) for k in arrays}


@dataclass
class GradCheckReport:
    rows: list[tuple[str, float]] = field(default_factory=list)
    frozen_block_max: float | None = None
    seconds: float = 0.0

    @property
    def max_error(self) -> float:
        return max((e for _, e in self.rows), default=0.0)

    @property
    def passed(self) -> bool:
        frozen_ok = self.frozen_block_max in (None, 0.0)
        return frozen_ok and all(e < TOLERANCE for _, e in self.rows)

    def to_text(self) -> str:
        lines = [f"{name} max_rel_err={err:.3e} {'PASS' if err < TOLERANCE else 'FAIL'}" for name, err in self.rows]
        if self.frozen_block_max is not None:
            ok = "PASS" if self.frozen_block_max == 0.0 else "FAIL"
            lines.append(f"deviation.frozen_grad max_abs={self.frozen_block_max:.3e} {ok}")
        lines.append(f"overall {'PASS' if self.passed else 'FAIL'} max_rel_err={self.max_error:.3e} seconds={self.seconds:.2f}")
        return "\n".join(lines) + "\n"


# suites ------------------------------------------------------------------------------


def _loss_cases(rng: np.random.Generator) -> dict[str, tuple[LossFn, dict[str, np.ndarray]]]:
    b, c, u, n = 5, 6, 12, 16
    labels = rng.integers(0, c, size=b)
    w = rng.uniform(0.5, 2.0, size=c)
    y_au = rng.integers(0, 2, size=(b, u))
    w_au = rng.uniform(0.5, 4.0, size=u)
    mask = rng.random((b, u)) < 0.8
    tv, ta = rng.uniform(-1, 1, n), rng.uniform(-1, 1, n)
    smooth = L.SmoothingConfig(0.2, c)
    return {
        "loss.weighted_ce": (
            lambda p: L.weighted_cross_entropy(nk.softmax(p["z"]), labels, w),
            {"z": rng.uniform(-1, 1, (b, c))},
        ),
        "loss.smoothed_ce": (
            lambda p: L.smoothed_cross_entropy(nk.softmax(p["z"]), labels, smooth, w),
            {"z": rng.uniform(-1, 1, (b, c))},
        ),
        "loss.ccc": (lambda p: L.ccc(p["v"], tv), {"v": rng.uniform(-1, 1, n)}),
        "loss.va": (
            lambda p: L.va_loss(p["v"], tv, p["a"], ta),
            {"v": rng.uniform(-1, 1, n), "a": rng.uniform(-1, 1, n)},
        ),
        "loss.weighted_bce": (
            lambda p: L.weighted_bce(nk.sigmoid(p["z"]), y_au, w_au, mask),
            {"z": rng.uniform(-1, 1, (b, u))},
        ),
    }


def _tiny_cfg() -> BackboneConfig:
    return BackboneConfig(input_size=8, channels=(2, 3), feature_dim=4, seed=0)


def _model_arrays(model: MultiHeadModel, names) -> dict[str, np.ndarray]:
    return {k: model.params[k].data.astype(np.float64) for k in names}


def _rebind(model: MultiHeadModel, p: Mapping[str, Tensor]) -> MultiHeadModel:
    params = dict(model.params)
    params.update(p)
    frozen = None if model.frozen is None else {k: Tensor(v.data, dtype=nk.default_dtype()) for k, v in model.frozen.items()}
    return MultiHeadModel(model.cfg, model.task_mode, model.slots, params, frozen)


def _mtl_targets(rng, n):
    return {
        "labels": rng.integers(0, 8, size=n),
        "v": rng.uniform(-1, 1, n),
        "a": rng.uniform(-1, 1, n),
        "aus": rng.integers(0, 2, size=(n, 12)),
    }


def _mtl_loss(preds, t) -> Tensor:
    l_expr = L.weighted_cross_entropy(preds.expr_probs, t["labels"])
    l_va = L.va_loss(nk.column(preds.va, 0), t["v"], nk.column(preds.va, 1), t["a"])
    l_au = L.weighted_bce(preds.au_probs, t["aus"])
    return L.mtl_total(l_expr, l_va, l_au)[0]


def run_suite(suite: str, seed: int = 0) -> GradCheckReport:
    if suite not in SUITES:
        raise ValueError(f"unknown gradcheck suite {suite!r}; expected one of {SUITES}")
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    cfg = _tiny_cfg()
    if suite in ("losses", "full"):
        for name, (fn, arrays) in _loss_cases(rng).items():
            report.rows.append((name, max(compare(fn, arrays).values())))
    if suite in ("backbone", "full"):
        x = rng.uniform(-1, 1, (1, 3, 8, 8))
        proj = rng.uniform(-1, 1, cfg.feature_dim)
        with nk.precision(np.float64):
            model = MultiHeadModel.create(cfg, "lsd")
        arrays = _model_arrays(model, model.backbone_params())
        arrays["input"] = x

        def fn(p):
            feats = backbone_forward(cfg, p, p["input"])
            return nk.sum_(nk.mul(feats, Tensor(proj[None, :])))

        for k, err in compare(fn, arrays).items():
            report.rows.append((f"backbone.{k}", err))
    if suite in ("heads", "full"):
        with nk.precision(np.float64):
            model = MultiHeadModel.create(cfg, "mtl", slots=3)
        head_names = [k for k in model.params if k.startswith("slot")]
        arrays = _model_arrays(model, head_names)
        arrays["features"] = rng.uniform(0, 1, (4, cfg.feature_dim))
        t = _mtl_targets(rng, 4)

        def fn(p):
            return _mtl_loss(multi_slot_forward(_rebind(model, p), p["features"]), t)

        for k, err in compare(fn, arrays).items():
            report.rows.append((f"heads.{k}", err))
    if suite in ("deviation", "full"):
        with nk.precision(np.float64):
            model = MultiHeadModel.create(cfg, "lsd", deviation=True)
            # move the trainable twin away from the frozen one so features are non-zero
            for k in model.frozen:
                model.params[k] = Tensor(model.params[k].data + rng.normal(0, 0.05, model.params[k].shape), requires_grad=True)
        x = Tensor(rng.uniform(-1, 1, (2, 3, 8, 8)), dtype=np.float64)
        proj = rng.uniform(-1, 1, cfg.feature_dim)
        names = list(model.frozen)
        arrays = _model_arrays(model, names)

        def fn(p):
            dev = _rebind(model, p).deviation
            return nk.sum_(nk.mul(deviation_forward(dev, cfg, x), Tensor(np.tile(proj, (2, 1)))))

        for k, err in compare(fn, arrays).items():
            report.rows.append((f"deviation.trainable.{k}", err))
        report.frozen_block_max = _frozen_gradient(model, cfg, x, proj)
    if suite == "full":
        with nk.precision(np.float64):
            model = MultiHeadModel.create(cfg, "mtl", slots=2)
        arrays = _model_arrays(model, model.params)
        x = Tensor(rng.uniform(-1, 1, (4, 3, 8, 8)), dtype=np.float64)
        t = _mtl_targets(rng, 4)

        def fn(p):
            m = _rebind(model, p)
            return _mtl_loss(multi_slot_forward(m, m.features(x)), t)

        report.rows.append(("full.cnn_mtl", max(compare(fn, arrays).values())))
    report.seconds = time.perf_counter() - t0
    return report


def _frozen_gradient(model: MultiHeadModel, cfg, x: Tensor, proj) -> float:
    """Largest |grad| that reaches the frozen twin after a backward pass (must be 0)."""
    with nk.precision(np.float64):
        dev = model.deviation
        with nk.Tape() as tape:
            loss = nk.sum_(nk.mul(deviation_forward(dev, cfg, x), Tensor(np.tile(proj, (x.shape[0], 1)))))
        tape.backward(loss)
    worst = 0.0
    for t in dev.frozen.values():
        if t.grad is not None:
            worst = max(worst, float(np.max(np.abs(t.grad))))
    return worst


def gradient_check(suite: str = "full", seed: int = 0) -> GradCheckReport:
    return run_suite(suite, seed)
