"""Optimisers, learning-rate schedule and the MTL / LSD training loops.

Training is deterministic for a given (config, manifest): the per-epoch
shuffle is seeded from ``(seed, epoch)`` and every update runs on one thread.
A run writes ``last.ckpt`` after each epoch (parameters, optimiser state and
progress) and ``best.ckpt`` whenever the selection score improves, plus a
``history.txt`` with one line per epoch.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import losses as L
from . import numkit as nk
from .augment import preprocess
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    ClassWeights,
    SampleRecord,
    atomic_write,
    class_weights,
    format_stats,
    load_images,
    normalization_stats,
    parse_manifest,
    parse_stats,
    resolve,
)
from .metrics import LSDReport, MetricReport, evaluate_lsd, evaluate_mtl
from .model import BackboneConfig, MultiHeadModel, Predictions, forward_task, predict
from .numkit import Tensor
from .schema import AU_NAMES, AU_UNLABELED, num_classes

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# optimisers ----------------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    buffers: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")

    def entries(self) -> dict[str, np.ndarray]:
        return {f"opt.{buf}.{name}": arr for buf, d in self.buffers.items() for name, arr in d.items()}

    def metadata(self) -> dict[str, str]:
        return {
            "optimizer": self.kind,
            "opt_lr": repr(self.lr),
            "opt_momentum": repr(self.momentum),
            "opt_beta1": repr(self.beta1),
            "opt_beta2": repr(self.beta2),
            "opt_eps": repr(self.eps),
            "opt_step": str(self.step),
        }

    @classmethod
    def restore(cls, entries: Mapping[str, np.ndarray], meta: Mapping[str, str]) -> "OptimizerState":
        state = cls(
            meta["optimizer"],
            lr=float(meta["opt_lr"]),
            momentum=float(meta["opt_momentum"]),
            beta1=float(meta["opt_beta1"]),
            beta2=float(meta["opt_beta2"]),
            eps=float(meta["opt_eps"]),
            step=int(meta["opt_step"]),
        )
        for key, arr in entries.items():
            if key.startswith("opt."):
                _, buf, name = key.split(".", 2)
                state.buffers.setdefault(buf, {})[name] = arr.copy()
        return state


def _buffer(state: OptimizerState, buf: str, name: str, like: np.ndarray) -> np.ndarray:
    store = state.buffers.setdefault(buf, {})
    arr = store.get(name)
    if arr is None:
        return np.zeros_like(like)
    if arr.shape != like.shape:
        raise nk.ShapeError(f"{buf} buffer for {name} has shape {arr.shape}, parameter has {like.shape}")
    return arr


def _check_pairs(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and np.shape(g) != p.shape:
            raise nk.ShapeError(f"gradient for {name} has shape {np.shape(g)}, parameter has {p.shape}")


def sgd_momentum_step(params: Mapping[str, np.ndarray], grads, state: OptimizerState, lr: float | None = None):
    """``v <- mu v + g``, ``w <- w - lr v``; no dampening, Nesterov or decay."""
    _check_pairs(params, grads)
    out = {}
    for name, w in params.items():
        g = grads.get(name)
        g = np.zeros_like(w) if g is None else np.asarray(g, dtype=w.dtype)
        mu = w.dtype.type(state.momentum)
        v = mu * _buffer(state, "velocity", name, w) + g
        state.buffers["velocity"][name] = v
        out[name] = w - w.dtype.type(state.lr if lr is None else lr) * v
    state.step += 1
    return out


def adam_step(params: Mapping[str, np.ndarray], grads, state: OptimizerState, lr: float | None = None):
    """Adam with bias correction."""
    _check_pairs(params, grads)
    state.step += 1
    t = state.step
    out = {}
    for name, w in params.items():
        g = grads.get(name)
        g = np.zeros_like(w) if g is None else np.asarray(g, dtype=w.dtype)
        f = w.dtype.type
        b1, b2 = f(state.beta1), f(state.beta2)
        m = b1 * _buffer(state, "m", name, w) + (f(1) - b1) * g
        v = b2 * _buffer(state, "v", name, w) + (f(1) - b2) * g * g
        state.buffers["m"][name] = m
        state.buffers["v"][name] = v
        m_hat = m / f(1.0 - state.beta1**t)
        v_hat = v / f(1.0 - state.beta2**t)
        out[name] = w - f(state.lr if lr is None else lr) * m_hat / (np.sqrt(v_hat) + f(state.eps))
    return out


def optimizer_step(model_params: Mapping[str, Tensor], state: OptimizerState, lr: float) -> None:
    params = {k: t.data for k, t in model_params.items()}
    grads = {k: t.grad for k, t in model_params.items() if t.grad is not None}
    step = sgd_momentum_step if state.kind == "sgd_momentum" else adam_step
    for k, arr in step(params, grads, state, lr).items():
        model_params[k].data = arr


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Half-cosine decay from ``base_lr`` at step 0 to 0 at ``total_steps``."""
    if total_steps < 1:
        raise ValueError("total_steps must be at least 1")
    if step < 0:
        raise ValueError("step must be non-negative")
    if step >= total_steps:
        return 0.0
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


# configuration -------------------------------------------------------------------


@dataclass
class TrainConfig:
    task: str = "lsd"
    epochs: int = 5
    batch_size: int = 64
    base_lr: float = 1e-3
    schedule: str = "cosine"
    optimizer: str = "adam"
    momentum: float = 0.9
    smoothing: float = 0.0
    seed: int = 0
    deviation: bool = False
    slots: int = 1
    eval_every: int = 1
    checkpoint: str = "run"
    input_size: int = 16
    channels: tuple[int, ...] = (8, 16)
    feature_dim: int = 64
    init_checkpoint: str = ""
    stats_file: str = ""

    def __post_init__(self):
        num_classes(self.task)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"schedule must be cosine or constant, got {self.schedule!r}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        OptimizerState(self.optimizer)
        L.SmoothingConfig(self.smoothing, num_classes(self.task))

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self.input_size, tuple(self.channels), self.feature_dim, self.seed)

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt_value(v)}\n" for k, v in dataclasses.asdict(self).items())


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _coerce(name: str, text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("on", "true", "1", "yes"):
            return True
        if text.lower() in ("off", "false", "0", "no"):
            return False
        raise ValueError(f"{name}: expected on/off, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(int(x) for x in text.split(",") if x.strip())
    return text


def parse_config_text(text: str, overrides: Mapping[str, str] | None = None) -> TrainConfig:
    """Build a TrainConfig from ``key=value`` lines; ``overrides`` win."""
    defaults = TrainConfig()
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ValueError(f"config line {lineno}: expected key=value")
        if key not in known:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        raw[key] = value
    for key, value in (overrides or {}).items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        raw[key] = value
    kwargs = {k: _coerce(k, v, getattr(defaults, k)) for k, v in raw.items()}
    return TrainConfig(**kwargs)


# data ----------------------------------------------------------------------------


@dataclass
class Split:
    records: list[SampleRecord]
    x: np.ndarray  # [N, 3, S, S] float32
    expression: np.ndarray
    valence: np.ndarray
    arousal: np.ndarray
    aus: np.ndarray

    def __len__(self) -> int:
        return len(self.records)


def make_split(records: Sequence[SampleRecord], images: Sequence[np.ndarray], mean, std, size: int) -> Split:
    x = np.stack([preprocess(im, mean, std, size) for im in images]) if images else np.zeros((0, 3, size, size), np.float32)
    return Split(
        list(records),
        x,
        np.array([r.expression for r in records], dtype=np.int64),
        np.array([r.valence for r in records], dtype=np.float64),
        np.array([r.arousal for r in records], dtype=np.float64),
        np.array([r.aus for r in records], dtype=np.int64).reshape(len(records), len(AU_NAMES)),
    )


def load_split(manifest, task: str, mean, std, size: int) -> Split:
    records = parse_manifest(manifest, task)
    return make_split(records, load_images(manifest, records), mean, std, size)


def manifest_stats(manifest, task: str) -> tuple[np.ndarray, np.ndarray]:
    records = parse_manifest(manifest, task)
    return normalization_stats([resolve(manifest, r) for r in records])


# losses over a batch ---------------------------------------------------------------


def _zero(dtype) -> Tensor:
    return Tensor(0.0, dtype=dtype)


def batch_loss(
    preds: Predictions,
    split: Split,
    idx: np.ndarray,
    task: str,
    weights: ClassWeights,
    smoothing: float,
) -> tuple[Tensor, L.LossBreakdown]:
    """Loss for rows ``idx`` of ``split`` given predictions for those rows.

    Each MTL task is averaged over the rows labelled for that task only.
    """
    dt = preds.expr_probs.dtype
    expr = split.expression[idx]
    smooth = L.SmoothingConfig(smoothing, num_classes(task))
    if task == "lsd":
        l_expr = L.smoothed_cross_entropy(preds.expr_probs, expr, smooth, weights.expr_weights)
        return l_expr, L.LossBreakdown(l_expr.item(), 0.0, 0.0, l_expr.item())

    rows = np.flatnonzero(expr >= 0)
    if rows.size:
        probs = nk.take_rows(preds.expr_probs, rows)
        l_expr = L.smoothed_cross_entropy(probs, expr[rows], smooth, weights.expr_weights)
    else:
        l_expr = _zero(dt)

    val, aro = split.valence[idx], split.arousal[idx]
    rows = np.flatnonzero((val != -5.0) & (aro != -5.0))
    if rows.size >= 2:
        va = nk.take_rows(preds.va, rows)
        l_va = L.va_loss(nk.column(va, 0), val[rows], nk.column(va, 1), aro[rows])
    else:
        l_va = _zero(dt)

    aus = split.aus[idx]
    mask = aus != AU_UNLABELED
    if mask.any():
        l_au = L.weighted_bce(preds.au_probs, np.where(mask, aus, 0), weights.au_pos_weights, mask)
    else:
        l_au = _zero(dt)
    return L.mtl_total(l_expr, l_va, l_au)


# training --------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    l_expr: float
    l_va: float
    l_au: float
    total: float
    lr_trace: list[float]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, math.ceil(n / batch_size))


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train_epoch(
    model: MultiHeadModel,
    split: Split,
    cfg: TrainConfig,
    weights: ClassWeights,
    opt: OptimizerState,
    epoch: int,
    total_steps: int,
) -> EpochStats:
    """One pass over ``split`` in a seeded order. Uses ``opt.step`` as the global step."""
    if len(split) == 0:
        raise TrainingError("cannot train on an empty split")
    order = epoch_order(cfg.seed, epoch, len(split))
    sums = np.zeros(4)
    lrs = []
    nb = 0
    for b, start in enumerate(range(0, len(split), cfg.batch_size)):
        idx = order[start : start + cfg.batch_size]
        lr = cosine_lr(opt.step, total_steps, cfg.base_lr) if cfg.schedule == "cosine" else cfg.base_lr
        model.zero_grad()
        with nk.Tape() as tape:
            preds = forward_task(model, Tensor._wrap(split.x[idx]), cfg.task)
            try:
                loss, parts = batch_loss(preds, split, idx, cfg.task, weights, cfg.smoothing)
            except FloatingPointError as exc:
                raise TrainingError(f"epoch {epoch} batch {b}: {exc}") from exc
        if not math.isfinite(parts.total):
            raise TrainingError(f"epoch {epoch} batch {b}: non-finite {cfg.task} loss {parts.total}")
        tape.backward(loss)
        optimizer_step(model.params, opt, lr)
        lrs.append(lr)
        sums += (parts.l_expr, parts.l_va, parts.l_au, parts.total)
        nb += 1
    means = sums / nb
    return EpochStats(epoch, *means.tolist(), lr_trace=lrs)


def predict_split(model: MultiHeadModel, split: Split, batch_size: int = 256) -> dict[str, np.ndarray]:
    """Averaged-slot probabilities for every row, no gradient tracking."""
    out: dict[str, list[np.ndarray]] = {"expr_probs": [], "va": [], "au_probs": []}
    for start in range(0, len(split), batch_size):
        p = forward_task(model, Tensor._wrap(split.x[start : start + batch_size]), model.task_mode)
        out["expr_probs"].append(p.expr_probs.data)
        if p.va is not None:
            out["va"].append(p.va.data)
            out["au_probs"].append(p.au_probs.data)
    return {k: np.concatenate(v) for k, v in out.items() if v}


def score_predictions(records: Sequence[SampleRecord], probs: Mapping[str, np.ndarray], task: str):
    classes, au = predict(probs["expr_probs"], probs.get("au_probs"))
    if task == "lsd":
        return evaluate_lsd([r.expression for r in records], classes)
    return evaluate_mtl(records, classes, probs["va"], au)


def evaluate_model(model: MultiHeadModel, split: Split) -> MetricReport | LSDReport:
    return score_predictions(split.records, predict_split(model, split), model.task_mode)


def selection_score(report) -> float:
    return report.p_lsd if isinstance(report, LSDReport) else report.p_mtl


# persistence -----------------------------------------------------------------------


def save_training_checkpoint(path, model: MultiHeadModel, opt: OptimizerState | None, progress: Mapping[str, object]) -> None:
    entries = dict(model.state())
    meta: dict[str, object] = dict(model.metadata())
    if opt is not None:
        entries.update(opt.entries())
        meta.update(opt.metadata())
    meta.update(progress)
    save_checkpoint(path, entries, meta)


def load_model(path) -> MultiHeadModel:
    entries, meta = load_checkpoint(path)
    return MultiHeadModel.from_state(entries, meta)


def load_training_checkpoint(path) -> tuple[MultiHeadModel, OptimizerState | None, dict[str, str]]:
    entries, meta = load_checkpoint(path)
    model = MultiHeadModel.from_state(entries, meta)
    opt = OptimizerState.restore(entries, meta) if "optimizer" in meta else None
    return model, opt, meta


HISTORY_FIELDS = ("epoch", "lr", "l_expr", "l_va", "l_au", "total", "train_score", "val_score")


def history_line(stats: EpochStats, train_score: float, val_score: float) -> str:
    vals = [stats.lr_trace[-1], stats.l_expr, stats.l_va, stats.l_au, stats.total, train_score, val_score]
    return f"epoch={stats.epoch} " + " ".join(f"{k}={v:.6f}" for k, v in zip(HISTORY_FIELDS[1:], vals))


@dataclass
class FitResult:
    best: Path
    last: Path
    history_path: Path
    history: list[dict]
    model: MultiHeadModel


def _pretrained_backbone(path) -> dict[str, Tensor]:
    entries, _ = load_checkpoint(path)
    bb = {k: Tensor(v) for k, v in entries.items() if k.startswith("bb.")}
    if not bb:
        raise ValueError(f"{path} holds no backbone parameters")
    return bb


def fit(
    cfg: TrainConfig,
    manifest,
    val_manifest=None,
    resume=None,
    stop_after: int | None = None,
) -> FitResult:
    """Train according to ``cfg``; outputs go to the ``cfg.checkpoint`` directory.

    ``resume`` continues from a ``last.ckpt`` written by an earlier run of the
    same config. ``stop_after`` ends the run early after that many epochs
    (the cosine schedule still spans ``cfg.epochs``).
    """
    out = Path(cfg.checkpoint)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.stats_file:
        mean, std = parse_stats(Path(cfg.stats_file).read_text(encoding="utf-8"))
    else:
        mean, std = manifest_stats(manifest, cfg.task)
    atomic_write(out / "stats.txt", format_stats(mean, std))
    atomic_write(out / "config.txt", cfg.to_text())
    train = load_split(manifest, cfg.task, mean, std, cfg.input_size)
    val = load_split(val_manifest, cfg.task, mean, std, cfg.input_size) if val_manifest else None
    weights = class_weights(train.records, cfg.task)
    total_steps = cfg.epochs * steps_per_epoch(len(train), cfg.batch_size)

    history_path = out / "history.txt"
    history_lines: list[str] = []
    best_score = -math.inf
    start_epoch = 1
    if resume:
        model, opt, meta = load_training_checkpoint(resume)
        if opt is None:
            raise ValueError(f"{resume} has no optimizer state; cannot resume")
        start_epoch = int(meta["epoch"]) + 1
        best_score = float(meta.get("best_score", "-inf"))
        if history_path.exists():
            history_lines = history_path.read_text(encoding="utf-8").splitlines()[: start_epoch - 1]
    else:
        backbone = _pretrained_backbone(cfg.init_checkpoint) if cfg.init_checkpoint else None
        model = MultiHeadModel.create(cfg.backbone(), cfg.task, cfg.slots, cfg.deviation, backbone)
        opt = OptimizerState(cfg.optimizer, lr=cfg.base_lr, momentum=cfg.momentum)

    last_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(start_epoch, last_epoch + 1):
        stats = train_epoch(model, train, cfg, weights, opt, epoch, total_steps)
        evaluate_now = epoch % cfg.eval_every == 0 or epoch == cfg.epochs
        train_score = val_score = float("nan")
        if evaluate_now:
            train_score = selection_score(evaluate_model(model, train))
            if val is not None:
                val_score = selection_score(evaluate_model(model, val))
        history_lines.append(history_line(stats, train_score, val_score))
        score = val_score if val is not None else train_score
        progress = {"epoch": epoch, "best_score": repr(best_score)}
        if evaluate_now and score > best_score:
            best_score = score
            progress["best_score"] = repr(best_score)
            save_training_checkpoint(out / "best.ckpt", model, None, progress)
        save_training_checkpoint(out / "last.ckpt", model, opt, progress)
        atomic_write(history_path, "\n".join(history_lines) + "\n")
        logger.info(history_lines[-1])
    return FitResult(out / "best.ckpt", out / "last.ckpt", history_path, [parse_history_line(h) for h in history_lines], model)


def parse_history_line(line: str) -> dict:
    out: dict = {}
    for item in line.split():
        k, _, v = item.partition("=")
        out[k] = int(v) if k == "epoch" else float(v)
    return out
