"""Manifests, class statistics, loss weights and a synthetic dataset generator.

Manifests are UTF-8 CSV files with a header row. Image paths are relative to
the manifest's directory so a dataset folder can be moved as a whole.

MTL header::

    path,valence,arousal,expression,au1,au2,au4,au6,au7,au10,au12,au15,au23,au24,au25,au26

LSD header::

    path,expression

Unlabeled entries use -5.0 for valence/arousal and -1 for expression/AUs.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .schema import (
    AU_NAMES,
    AU_UNLABELED,
    EXPR_UNLABELED,
    VA_UNLABELED,
    class_names,
    num_classes,
)

MANIFEST_VERSION = 1
MTL_HEADER = ("path", "valence", "arousal", "expression", *AU_NAMES)
LSD_HEADER = ("path", "expression")
_NO_AUS = (AU_UNLABELED,) * len(AU_NAMES)


class ManifestError(ValueError):
    """A manifest row or header failed validation."""


class ImageDecodeError(OSError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    expression: int
    valence: float = VA_UNLABELED
    arousal: float = VA_UNLABELED
    aus: tuple[int, ...] = _NO_AUS
    line: int = field(default=0, compare=False)

    @property
    def has_va(self) -> bool:
        return self.valence != VA_UNLABELED and self.arousal != VA_UNLABELED

    @property
    def has_expr(self) -> bool:
        return self.expression != EXPR_UNLABELED


def validate_record(rec: SampleRecord, task: str) -> None:
    where = f"line {rec.line}: " if rec.line else ""
    c = num_classes(task)
    if task == "lsd":
        if not 0 <= rec.expression < c:
            raise ManifestError(f"{where}expression {rec.expression} outside [0, {c})")
        return
    if not (rec.expression == EXPR_UNLABELED or 0 <= rec.expression < c):
        raise ManifestError(f"{where}unknown expression index {rec.expression}")
    for name, v in (("valence", rec.valence), ("arousal", rec.arousal)):
        if not (v == VA_UNLABELED or -1.0 <= v <= 1.0):
            raise ManifestError(f"{where}{name} {v} is neither in [-1, 1] nor the sentinel {VA_UNLABELED}")
    if len(rec.aus) != len(AU_NAMES):
        raise ManifestError(f"{where}expected {len(AU_NAMES)} AU labels, got {len(rec.aus)}")
    if any(a not in (0, 1, AU_UNLABELED) for a in rec.aus):
        raise ManifestError(f"{where}AU labels must be 0, 1 or -1: {rec.aus}")


def _header(task: str) -> tuple[str, ...]:
    if task == "mtl":
        return MTL_HEADER
    if task == "lsd":
        return LSD_HEADER
    raise ValueError(f"unknown task {task!r}")


def _parse_int(text: str, what: str, line: int) -> int:
    try:
        value = float(text)
    except ValueError:
        raise ManifestError(f"line {line}: {what} {text!r} is not a number") from None
    if value != int(value):
        raise ManifestError(f"line {line}: {what} {text!r} is not an integer")
    return int(value)


def _parse_float(text: str, what: str, line: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise ManifestError(f"line {line}: {what} {text!r} is not a number") from None


def parse_manifest_text(text: str, task: str) -> list[SampleRecord]:
    header = _header(task)
    rows = csv.reader(io.StringIO(text))
    try:
        first = next(rows)
    except StopIteration:
        raise ManifestError("manifest is empty; a header row is required") from None
    if tuple(h.strip() for h in first) != header:
        raise ManifestError(f"line 1: header {','.join(first)!r} does not match {task} schema {','.join(header)!r}")
    records = []
    for lineno, row in enumerate(rows, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise ManifestError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        path = row[0].strip()
        if not path:
            raise ManifestError(f"line {lineno}: empty image path")
        if task == "lsd":
            rec = SampleRecord(path, _parse_int(row[1], "expression", lineno), line=lineno)
        else:
            rec = SampleRecord(
                path,
                expression=_parse_int(row[3], "expression", lineno),
                valence=_parse_float(row[1], "valence", lineno),
                arousal=_parse_float(row[2], "arousal", lineno),
                aus=tuple(_parse_int(v, AU_NAMES[i], lineno) for i, v in enumerate(row[4:])),
                line=lineno,
            )
        validate_record(rec, task)
        records.append(rec)
    return records


def parse_manifest(path, task: str) -> list[SampleRecord]:
    return parse_manifest_text(Path(path).read_text(encoding="utf-8"), task)


def format_manifest(records: Iterable[SampleRecord], task: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_header(task))
    for r in records:
        if task == "lsd":
            w.writerow([r.image_path, r.expression])
        else:
            w.writerow([r.image_path, repr(float(r.valence)), repr(float(r.arousal)), r.expression, *r.aus])
    return buf.getvalue()


def atomic_write(path, data: str | bytes) -> None:
    """Write to a temporary sibling then rename over ``path``."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode, **({} if isinstance(data, bytes) else {"encoding": "utf-8", "newline": ""})) as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_manifest(path, records: Sequence[SampleRecord], task: str) -> None:
    atomic_write(path, format_manifest(records, task))


# class statistics ----------------------------------------------------------------


@dataclass(frozen=True)
class ClassDistribution:
    counts: np.ndarray
    names: tuple[str, ...]

    @property
    def max_class(self) -> int:
        return int(np.argmax(self.counts))

    @property
    def max_count(self) -> int:
        return int(self.counts.max())

    @property
    def imbalance_ratio(self) -> float:
        """Largest class count over smallest (inf when a class is empty)."""
        lo = self.counts.min()
        return float("inf") if lo == 0 else float(self.counts.max() / lo)


def class_distribution(records: Sequence[SampleRecord], task: str) -> ClassDistribution:
    if not records:
        raise ValueError("class_distribution needs at least one record")
    names = class_names(task)
    counts = np.zeros(len(names), dtype=np.int64)
    for r in records:
        if r.expression != EXPR_UNLABELED:
            counts[r.expression] += 1
    return ClassDistribution(counts, names)


def distribution_from_counts(counts, task: str) -> ClassDistribution:
    counts = np.asarray(counts, dtype=np.int64)
    names = class_names(task)
    if counts.shape != (len(names),):
        raise ValueError(f"{task} needs {len(names)} counts, got {counts.size}")
    return ClassDistribution(counts, names)


@dataclass(frozen=True)
class ClassWeights:
    expr_weights: np.ndarray
    au_pos_weights: np.ndarray | None = None


def expr_class_weights(dist: ClassDistribution) -> np.ndarray:
    """Inverse-frequency weights normalised to mean 1."""
    n = dist.counts.astype(np.float64)
    if (n <= 0).any():
        empty = [dist.names[i] for i in np.flatnonzero(n <= 0)]
        raise ValueError(f"classes with no samples: {', '.join(empty)}")
    inv = 1.0 / n
    return inv * (n.size / inv.sum())


def au_pos_weights(records: Sequence[SampleRecord]) -> np.ndarray:
    """Per-AU ratio of labelled negatives to labelled positives."""
    aus = np.array([r.aus for r in records], dtype=np.int64).reshape(-1, len(AU_NAMES))
    pos = (aus == 1).sum(axis=0)
    neg = (aus == 0).sum(axis=0)
    if (pos == 0).any():
        i = int(np.flatnonzero(pos == 0)[0])
        raise ValueError(f"AU index {i} ({AU_NAMES[i]}) has no positive samples")
    return neg / pos


def class_weights(records: Sequence[SampleRecord], task: str) -> ClassWeights:
    expr = expr_class_weights(class_distribution(records, task))
    return ClassWeights(expr, au_pos_weights(records) if task == "mtl" else None)


# images --------------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """Decode an image to uint8 RGB [H, W, 3]."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc


def save_png(path, image: np.ndarray) -> None:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8), "RGB").save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


def resolve(manifest_path, rec: SampleRecord) -> Path:
    return Path(manifest_path).parent / rec.image_path


def load_images(manifest_path, records: Sequence[SampleRecord]) -> list[np.ndarray]:
    return [load_image(resolve(manifest_path, r)) for r in records]


def normalization_stats(image_paths: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population std of pixel values scaled to [0, 1].

    Images are merged one at a time with the pairwise (Chan et al.) update,
    so the result does not depend on holding every image in memory.
    """
    if not image_paths:
        raise ValueError("normalization_stats needs at least one image")
    count = 0
    mean = np.zeros(3)
    m2 = np.zeros(3)
    for p in image_paths:
        px = load_image(p).reshape(-1, 3).astype(np.float64) / 255.0
        n_b = px.shape[0]
        mean_b = px.mean(axis=0)
        m2_b = ((px - mean_b) ** 2).sum(axis=0)
        total = count + n_b
        delta = mean_b - mean
        mean = mean + delta * (n_b / total)
        m2 = m2 + m2_b + delta**2 * (count * n_b / total)
        count = total
    return mean, np.sqrt(m2 / count)


def format_stats(mean, std) -> str:
    return "".join(
        [
            "mean=" + ",".join(repr(float(v)) for v in mean) + "\n",
            "std=" + ",".join(repr(float(v)) for v in std) + "\n",
        ]
    )


def parse_stats(text: str) -> tuple[np.ndarray, np.ndarray]:
    vals = {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if sep and key.strip() in ("mean", "std"):
            vals[key.strip()] = np.array([float(v) for v in value.split(",")])
    if set(vals) != {"mean", "std"} or any(v.shape != (3,) for v in vals.values()):
        raise ValueError("stats file needs 'mean=r,g,b' and 'std=r,g,b' lines")
    return vals["mean"], vals["std"]


# synthetic data ----------------------------------------------------------------------

# per-class VA centres, loosely following the circumplex placement of each expression
_VA_CENTRES = {
    "Neutral": (0.0, 0.0),
    "Anger": (-0.6, 0.7),
    "Disgust": (-0.7, 0.3),
    "Fear": (-0.5, 0.8),
    "Happiness": (0.8, 0.5),
    "Sadness": (-0.7, -0.5),
    "Surprise": (0.3, 0.9),
    "Other": (0.1, -0.3),
}


def _au_table() -> np.ndarray:
    # fixed class x AU activation probabilities; independent of the dataset seed
    rng = np.random.default_rng(20220714)
    return rng.choice([0.1, 0.3, 0.7, 0.9], size=(len(_VA_CENTRES), len(AU_NAMES)))


def _pattern(cls: int, size: int, phase: int) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2
    r = np.hypot(x - c, y - c)
    period = max(4, size // 4)
    kind = cls % 8
    if kind == 0:
        m = ((y + phase) % period) < period / 2
    elif kind == 1:
        m = ((x + phase) % period) < period / 2
    elif kind == 2:
        m = ((x + y + phase) % period) < period / 2
    elif kind == 3:
        m = ((x - y + phase + size) % period) < period / 2
    elif kind == 4:
        m = ((x // (period / 2) + y // (period / 2)) % 2) == 0
    elif kind == 5:
        m = r < size * 0.3
    elif kind == 6:
        m = np.abs(r - size * 0.3) < max(1.0, size / 10)
    else:
        m = (np.abs(x - c) < size / 8) | (np.abs(y - c) < size / 8)
    return m.astype(np.float64)


def _perimeter(size: int) -> list[tuple[int, int]]:
    top = [(0, j) for j in range(size)]
    right = [(i, size - 1) for i in range(1, size)]
    bottom = [(size - 1, j) for j in range(size - 2, -1, -1)]
    left = [(i, 0) for i in range(size - 2, 0, -1)]
    return top + right + bottom + left


def render_sample(cls: int, size: int, rng: np.random.Generator, va=None, aus=None) -> np.ndarray:
    """Procedural face stand-in: class pattern in green, VA as red/blue levels, AUs as border dots."""
    pat = _pattern(cls, size, int(rng.integers(0, 4)))
    img = np.empty((size, size, 3))
    base_r, base_b = (0.0, 0.0) if va is None else (va[0], va[1])
    img[..., 0] = 128 + 90 * base_r + 25 * pat
    img[..., 1] = 40 + 170 * pat
    img[..., 2] = 128 + 90 * base_b - 25 * pat
    img += rng.normal(0.0, 12.0, size=img.shape)
    if aus is not None:
        ring = _perimeter(size)
        for i, a in enumerate(aus):
            r, c = ring[(i * len(ring)) // len(AU_NAMES)]
            img[r, c] = 255.0 if a == 1 else 0.0
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_synthetic(
    out_dir,
    task: str,
    per_class: int,
    size: int,
    seed: int,
    unlabeled_rate: float = 0.0,
) -> Path:
    """Write a class-balanced procedural dataset and return its manifest path.

    For ``mtl``, VA is drawn from per-class Gaussians and AUs from per-class
    Bernoullis; both are also drawn into the image so they are learnable.
    ``unlabeled_rate`` independently blanks each task's labels per row.
    """
    if size < 8:
        raise ValueError(f"synthetic images need size >= 8, got {size}")
    if per_class < 1:
        raise ValueError("per_class must be positive")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    names = class_names(task)
    au_table = _au_table()
    records = []
    for cls, name in enumerate(names):
        for i in range(per_class):
            rng = np.random.default_rng([seed, cls, i])
            rel = f"images/{name.lower()}_{i:05d}.png"
            if task == "lsd":
                img = render_sample(cls, size, rng)
                records.append(SampleRecord(rel, cls))
            else:
                centre = np.array(_VA_CENTRES[name])
                va = np.clip(centre + rng.normal(0.0, 0.2, size=2), -1.0, 1.0)
                aus = (rng.random(len(AU_NAMES)) < au_table[cls]).astype(int)
                img = render_sample(cls, size, rng, va=va, aus=aus)
                drop = rng.random(3) < unlabeled_rate
                records.append(
                    SampleRecord(
                        rel,
                        expression=EXPR_UNLABELED if drop[0] else cls,
                        valence=VA_UNLABELED if drop[1] else float(va[0]),
                        arousal=VA_UNLABELED if drop[1] else float(va[1]),
                        aus=_NO_AUS if drop[2] else tuple(int(a) for a in aus),
                    )
                )
            save_png(out_dir / rel, img)
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, records, task)
    return manifest
