"""Tiny convolutional backbone, multi-slot task heads and the deviation module.

The backbone is conv3x3 -> relu -> avgpool2, twice, then a dense layer with
relu. On top of it sit K structurally identical "feature slots": each slot
projects the shared feature vector and runs its own EXPR/VA/AU heads, and the
model output is the mean over slots of the per-slot probabilities (and VA
values). With the deviation module enabled the feature vector is the
difference between a trainable backbone and a frozen copy of it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import numkit as nk
from .numkit import Tensor
from .schema import AU_NAMES, num_classes

NUM_AUS = len(AU_NAMES)
PROJ_BIAS_INIT = 0.1


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 16
    channels: tuple[int, ...] = (8, 16)
    feature_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")
        if self.input_size % 4 or self.input_size < 4:
            raise ValueError(f"input_size must be a positive multiple of 4, got {self.input_size}")
        if len(self.channels) != 2 or min(self.channels) <= 0:
            raise ValueError(f"channels must be two positive widths, got {self.channels}")

    @property
    def flat_dim(self) -> int:
        return self.channels[1] * (self.input_size // 4) ** 2


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator | None = None) -> dict[str, Tensor]:
    rng = rng or np.random.default_rng(cfg.seed)
    c1, c2 = cfg.channels
    return {
        "bb.conv1.w": Tensor(_he(rng, (c1, 3, 3, 3), 27), requires_grad=True),
        "bb.conv1.b": Tensor(np.zeros(c1), requires_grad=True),
        "bb.conv2.w": Tensor(_he(rng, (c2, c1, 3, 3), 9 * c1), requires_grad=True),
        "bb.conv2.b": Tensor(np.zeros(c2), requires_grad=True),
        "bb.fc.w": Tensor(_he(rng, (cfg.flat_dim, cfg.feature_dim), cfg.flat_dim), requires_grad=True),
        "bb.fc.b": Tensor(np.zeros(cfg.feature_dim), requires_grad=True),
    }


def backbone_forward(cfg: BackboneConfig, params: Mapping[str, Tensor], batch: Tensor) -> Tensor:
    """[N, 3, S, S] -> [N, D] features."""
    n = batch.shape[0]
    if batch.shape[1:] != (3, cfg.input_size, cfg.input_size):
        raise nk.ShapeError(f"batch {batch.shape} does not match input size {cfg.input_size}")
    h = nk.relu(nk.conv2d(batch, params["bb.conv1.w"], params["bb.conv1.b"]))
    h = nk.avg_pool2(h)
    h = nk.relu(nk.conv2d(h, params["bb.conv2.w"], params["bb.conv2.b"]))
    h = nk.avg_pool2(h)
    h = nk.reshape(h, (n, cfg.flat_dim))
    return nk.relu(nk.add_rowvec(nk.matmul(h, params["bb.fc.w"]), params["bb.fc.b"]))


@dataclass
class DeviationExtractor:
    """Siamese backbone pair; features are trainable(x) - frozen(x)."""

    frozen: dict[str, Tensor]
    trainable: dict[str, Tensor]

    @classmethod
    def from_backbone(cls, params: Mapping[str, Tensor]) -> "DeviationExtractor":
        frozen = {k: Tensor(v.data, requires_grad=False, dtype=v.dtype) for k, v in params.items()}
        trainable = {k: Tensor(v.data, requires_grad=True, dtype=v.dtype) for k, v in params.items()}
        return cls(frozen, trainable)

    def __post_init__(self):
        if self.frozen.keys() != self.trainable.keys():
            raise ValueError("frozen and trainable backbones have different parameter names")
        for k in self.frozen:
            if self.frozen[k].shape != self.trainable[k].shape:
                raise nk.ShapeError(f"{k}: frozen {self.frozen[k].shape} vs trainable {self.trainable[k].shape}")
        for t in self.frozen.values():
            t.requires_grad = False


def deviation_forward(dev: DeviationExtractor, cfg: BackboneConfig, batch: Tensor) -> Tensor:
    return nk.sub(backbone_forward(cfg, dev.trainable, batch), backbone_forward(cfg, dev.frozen, batch))


@dataclass
class Predictions:
    expr_probs: Tensor
    va: Tensor | None = None
    au_probs: Tensor | None = None


def init_slots(
    feature_dim: int, slots: int, task_mode: str, rng: np.random.Generator
) -> dict[str, Tensor]:
    c = num_classes(task_mode)
    d = feature_dim
    out: dict[str, Tensor] = {}
    for k in range(slots):
        p = f"slot{k}."
        out[p + "proj.w"] = Tensor(_he(rng, (d, d), d), requires_grad=True)
        # positive bias keeps the projection relu open on all-zero features,
        # which is exactly what the deviation module emits at construction
        out[p + "proj.b"] = Tensor(np.full(d, PROJ_BIAS_INIT), requires_grad=True)
        out[p + "expr.w"] = Tensor(rng.normal(0.0, np.sqrt(1.0 / d), (d, c)), requires_grad=True)
        out[p + "expr.b"] = Tensor(np.zeros(c), requires_grad=True)
        if task_mode == "mtl":
            out[p + "va.w"] = Tensor(rng.normal(0.0, np.sqrt(1.0 / d), (d, 2)), requires_grad=True)
            out[p + "va.b"] = Tensor(np.zeros(2), requires_grad=True)
            out[p + "au.w"] = Tensor(rng.normal(0.0, np.sqrt(1.0 / d), (d, NUM_AUS)), requires_grad=True)
            out[p + "au.b"] = Tensor(np.zeros(NUM_AUS), requires_grad=True)
    return out


def _affine(x: Tensor, params: Mapping[str, Tensor], name: str) -> Tensor:
    return nk.add_rowvec(nk.matmul(x, params[name + ".w"]), params[name + ".b"])


@dataclass
class MultiHeadModel:
    cfg: BackboneConfig
    task_mode: str
    slots: int
    params: dict[str, Tensor]
    frozen: dict[str, Tensor] | None = None
    meta: dict[str, str] = field(default_factory=dict)

    @classmethod
    def create(
        cls,
        cfg: BackboneConfig,
        task_mode: str = "mtl",
        slots: int = 1,
        deviation: bool = False,
        backbone: Mapping[str, Tensor] | None = None,
    ) -> "MultiHeadModel":
        """Fresh model; ``backbone`` seeds the feature extractor (the deviation twin starts from it too)."""
        if slots < 1:
            raise ValueError("a model needs at least one feature slot")
        num_classes(task_mode)
        rng = np.random.default_rng(cfg.seed)
        bb = init_backbone(cfg, rng)
        if backbone is not None:
            for k, v in backbone.items():
                if bb[k].shape != v.shape:
                    raise nk.ShapeError(f"pretrained {k} has shape {v.shape}, expected {bb[k].shape}")
                bb[k] = Tensor(v.data, requires_grad=True)
        params = dict(bb)
        params.update(init_slots(cfg.feature_dim, slots, task_mode, rng))
        frozen = None
        if deviation:
            frozen = DeviationExtractor.from_backbone(bb).frozen
        return cls(cfg, task_mode, slots, params, frozen)

    @property
    def deviation(self) -> DeviationExtractor | None:
        if self.frozen is None:
            return None
        return DeviationExtractor(self.frozen, {k: self.params[k] for k in self.frozen})

    def backbone_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("bb.")}

    def features(self, batch: Tensor) -> Tensor:
        dev = self.deviation
        if dev is not None:
            return deviation_forward(dev, self.cfg, batch)
        return backbone_forward(self.cfg, self.params, batch)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        if self.frozen is not None:
            out.update({"frozen." + k: v.data for k, v in self.frozen.items()})
        return out

    def metadata(self) -> dict[str, str]:
        return {
            "task_mode": self.task_mode,
            "slots": str(self.slots),
            "input_size": str(self.cfg.input_size),
            "channels": ",".join(str(c) for c in self.cfg.channels),
            "feature_dim": str(self.cfg.feature_dim),
            "model_seed": str(self.cfg.seed),
            "deviation": "on" if self.frozen is not None else "off",
        }

    @classmethod
    def from_state(cls, entries: Mapping[str, np.ndarray], meta: Mapping[str, str]) -> "MultiHeadModel":
        cfg = BackboneConfig(
            input_size=int(meta["input_size"]),
            channels=tuple(int(c) for c in meta["channels"].split(",")),
            feature_dim=int(meta["feature_dim"]),
            seed=int(meta.get("model_seed", 0)),
        )
        model = cls.create(cfg, meta["task_mode"], int(meta["slots"]), meta.get("deviation") == "on")
        for k in model.params:
            if k not in entries:
                raise ValueError(f"checkpoint is missing parameter {k}")
            if entries[k].shape != model.params[k].shape:
                raise nk.ShapeError(f"checkpoint {k} has shape {entries[k].shape}, expected {model.params[k].shape}")
            model.params[k] = Tensor(entries[k], requires_grad=True, dtype=np.float32)
        if model.frozen is not None:
            for k in model.frozen:
                model.frozen[k] = Tensor(entries["frozen." + k], dtype=np.float32)
        model.meta = dict(meta)
        return model


def multi_slot_forward(model: MultiHeadModel, features: Tensor) -> Predictions:
    """Run every slot's heads and average probabilities / VA values over slots."""
    expr = va = au = None
    inv_k = 1.0 / model.slots
    for k in range(model.slots):
        p = f"slot{k}."
        h = nk.relu(_affine(features, model.params, p + "proj"))
        e = nk.softmax(_affine(h, model.params, p + "expr"))
        expr = e if expr is None else nk.add(expr, e)
        if model.task_mode == "mtl":
            v = nk.tanh(_affine(h, model.params, p + "va"))
            a = nk.sigmoid(_affine(h, model.params, p + "au"))
            va = v if va is None else nk.add(va, v)
            au = a if au is None else nk.add(au, a)
    if model.slots > 1:
        expr = nk.scale(expr, inv_k)
        if va is not None:
            va = nk.scale(va, inv_k)
            au = nk.scale(au, inv_k)
    return Predictions(expr, va, au)


def forward_task(model: MultiHeadModel, batch: Tensor, task: str) -> Predictions:
    if task != model.task_mode:
        raise ValueError(f"model was built for {model.task_mode!r}, asked to run {task!r}")
    return multi_slot_forward(model, model.features(batch))


def predict(expr_probs, au_probs=None) -> tuple[np.ndarray, np.ndarray | None]:
    """Argmax classes (first index wins ties) and AUs thresholded at >= 0.5."""
    e = np.asarray(expr_probs.data if isinstance(expr_probs, Tensor) else expr_probs)
    classes = np.argmax(e, axis=1)
    if au_probs is None:
        return classes, None
    a = np.asarray(au_probs.data if isinstance(au_probs, Tensor) else au_probs)
    return classes, (a >= 0.5).astype(np.int64)
