"""Test-time ensembling by plain averaging of member outputs.

Members' softmax probabilities, VA values and AU probabilities are averaged
without weights, then the usual argmax / 0.5 threshold is applied to the
average. Averaging happens in member order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import LSDReport, MetricReport
from .model import MultiHeadModel
from .schema import num_classes
from .trainer import Split, load_model, predict_split, score_predictions


def _stack(members: Sequence, what: str) -> np.ndarray:
    if not members:
        raise ValueError(f"{what}: need at least one member")
    arrs = [np.asarray(m, dtype=np.float64) for m in members]
    shape = arrs[0].shape
    for i, a in enumerate(arrs):
        if a.shape != shape:
            raise ValueError(f"{what}: member {i} has shape {a.shape}, expected {shape}")
    return np.stack(arrs)


def average_probs(member_probs: Sequence) -> np.ndarray:
    stacked = _stack(member_probs, "average_probs")
    sums = stacked.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-5) or np.any(stacked < 0):
        raise ValueError("average_probs: every member row must lie on the probability simplex")
    return stacked.mean(axis=0)


def average_va(member_va: Sequence) -> np.ndarray:
    stacked = _stack(member_va, "average_va")
    if np.any(np.abs(stacked) > 1.0):
        raise ValueError("average_va: VA values must lie in [-1, 1]")
    return stacked.mean(axis=0)


def average_au(member_au: Sequence) -> np.ndarray:
    return _stack(member_au, "average_au").mean(axis=0)


def majority_vote(member_probs: Sequence) -> np.ndarray:
    """Per-row plurality of member argmaxes (lowest class wins ties); for comparison only."""
    stacked = _stack(member_probs, "majority_vote")
    votes = stacked.argmax(axis=-1)
    c = stacked.shape[-1]
    counts = np.apply_along_axis(lambda v: np.bincount(v, minlength=c), 0, votes)
    return counts.argmax(axis=0)


@dataclass
class EnsembleSet:
    members: list[MultiHeadModel]
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        if not self.names:
            self.names = [f"member{i}" for i in range(len(self.members))]
        first = self.members[0]
        for name, m in zip(self.names, self.members):
            if m.task_mode != first.task_mode:
                raise ValueError(f"member {name} is a {m.task_mode} model, expected {first.task_mode}")
            if m.cfg.input_size != first.cfg.input_size:
                raise ValueError(f"member {name} expects {m.cfg.input_size}px input, expected {first.cfg.input_size}")

    @property
    def task_mode(self) -> str:
        return self.members[0].task_mode

    @classmethod
    def load(cls, paths: Sequence, names: Sequence[str] | None = None) -> "EnsembleSet":
        members = []
        for p in paths:
            try:
                members.append(load_model(p))
            except (OSError, ValueError) as exc:
                raise ValueError(f"cannot load ensemble member {p}: {exc}") from exc
        return cls(members, list(names) if names else _member_names(paths))


def _member_names(paths: Sequence) -> list[str]:
    stems = [Path(p).stem for p in paths]
    if len(set(stems)) == len(stems):
        return stems
    # runs usually all end in last.ckpt; the run directory tells them apart
    return [f"{Path(p).parent.name}/{Path(p).stem}" for p in paths]


@dataclass
class EnsembleReport:
    ensemble: MetricReport | LSDReport
    members: list[tuple[str, MetricReport | LSDReport]]

    def to_text(self) -> str:
        """Per-member rows then the ensemble row, per-class F1 columns first."""
        rows = self.members + [("Ensemble", self.ensemble)]
        first = rows[0][1]
        names = [n for n, _ in first.per_class_f1]
        head = "method," + ",".join(names) + ",avg"
        if isinstance(first, MetricReport):
            head += ",p_va,p_au,p_mtl"
        lines = [head]
        for label, r in rows:
            cells = [f"{v:.6f}" for _, v in r.per_class_f1]
            if isinstance(r, LSDReport):
                cells.append(f"{r.p_lsd:.6f}")
            else:
                cells += [f"{r.p_expr:.6f}", f"{r.p_va:.6f}", f"{r.p_au:.6f}", f"{r.p_mtl:.6f}"]
            lines.append(",".join([label, *cells]))
        return "\n".join(lines) + "\n"


def ensemble_evaluate(ens: EnsembleSet, split: Split, task: str, threads: int = 1) -> EnsembleReport:
    """Score every member alone and the probability-averaged ensemble."""
    if task != ens.task_mode:
        raise ValueError(f"ensemble holds {ens.task_mode} models, asked to evaluate {task}")
    num_classes(task)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        outputs = list(pool.map(lambda m: predict_split(m, split), ens.members))
    member_reports = [(n, score_predictions(split.records, o, task)) for n, o in zip(ens.names, outputs)]
    avg = {"expr_probs": average_probs([o["expr_probs"] for o in outputs])}
    if task == "mtl":
        avg["va"] = average_va([o["va"] for o in outputs])
        avg["au_probs"] = average_au([o["au_probs"] for o in outputs])
    return EnsembleReport(score_predictions(split.records, avg, task), member_reports)
