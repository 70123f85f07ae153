"""RandAugment-based class balancing and image preprocessing.

Twelve of the usual fourteen RandAugment operations are available; Solarize
and Equalize are left out because they distort face colours. Magnitudes use
the integer 0..30 scale and map to concrete parameters through a fixed table
(``TABLE_VERSION``). Augmented copies are written to disk once so that the
balanced dataset is a fixed, reproducible artefact.
"""

from __future__ import annotations

import enum
import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageEnhance, ImageOps

from .data import ClassDistribution, SampleRecord, atomic_write, load_image, save_png, write_manifest

TABLE_VERSION = "affectkit-randaug-v1"
MAX_MAGNITUDE = 30


class TransformKind(enum.Enum):
    IDENTITY = "Identity"
    AUTO_CONTRAST = "AutoContrast"
    ROTATE = "Rotate"
    POSTERIZE = "Posterize"
    COLOR = "Color"
    CONTRAST = "Contrast"
    BRIGHTNESS = "Brightness"
    SHARPNESS = "Sharpness"
    SHEAR_X = "ShearX"
    SHEAR_Y = "ShearY"
    TRANSLATE_X = "TranslateX"
    TRANSLATE_Y = "TranslateY"


ALL_KINDS = tuple(TransformKind)
_ENHANCERS = {
    TransformKind.COLOR: ImageEnhance.Color,
    TransformKind.CONTRAST: ImageEnhance.Contrast,
    TransformKind.BRIGHTNESS: ImageEnhance.Brightness,
    TransformKind.SHARPNESS: ImageEnhance.Sharpness,
}


@dataclass(frozen=True)
class AugmentPolicy:
    num_ops: int = 2
    magnitude: int = 9
    seed: int = 0

    def __post_init__(self):
        if self.num_ops < 0:
            raise ValueError("num_ops must be non-negative")
        _check_magnitude(self.magnitude)

    def sidecar(self) -> str:
        return (
            f"seed={self.seed}\nnum_ops={self.num_ops}\nmagnitude={self.magnitude}\n"
            f"table_version={TABLE_VERSION}\n"
        )


def _check_magnitude(m: int) -> None:
    if not 0 <= m <= MAX_MAGNITUDE:
        raise ValueError(f"magnitude {m} outside 0..{MAX_MAGNITUDE}")


def magnitude_map(kind: TransformKind, magnitude: int, direction: int = 1, image_size: int = 224):
    """Concrete parameter for ``kind`` at integer magnitude 0..30.

    Rotate returns degrees, shears a shear factor, translations pixels (for a
    side of ``image_size``), Posterize the number of kept bits, the enhance
    ops a blend factor. Identity and AutoContrast return None.
    """
    _check_magnitude(magnitude)
    sign = 1 if direction >= 0 else -1
    m = magnitude
    if kind is TransformKind.ROTATE:
        return sign * float(m)
    if kind in (TransformKind.SHEAR_X, TransformKind.SHEAR_Y):
        return sign * 0.01 * m
    if kind in (TransformKind.TRANSLATE_X, TransformKind.TRANSLATE_Y):
        return sign * (m / MAX_MAGNITUDE * 0.33) * image_size
    if kind is TransformKind.POSTERIZE:
        return 8 - int(np.floor(m * 4 / MAX_MAGNITUDE + 0.5))
    if kind in _ENHANCERS:
        return 1.0 + sign * 0.03 * m
    return None


def _affine(im: Image.Image, coeffs) -> Image.Image:
    return im.transform(im.size, Image.Transform.AFFINE, coeffs, resample=Image.Resampling.BILINEAR, fillcolor=(0, 0, 0))


def apply_transform(image: np.ndarray, kind: TransformKind, param=None) -> np.ndarray:
    """Apply one transform to a uint8 RGB image; the output keeps its size."""
    if kind is TransformKind.IDENTITY:
        return image.copy()
    if kind is TransformKind.POSTERIZE:
        bits = int(param)
        mask = (0xFF << (8 - bits)) & 0xFF
        return image & np.uint8(mask)
    im = Image.fromarray(np.asarray(image, dtype=np.uint8), "RGB")
    if kind is TransformKind.AUTO_CONTRAST:
        out = ImageOps.autocontrast(im)
    elif kind is TransformKind.ROTATE:
        out = im.rotate(float(param), resample=Image.Resampling.BILINEAR, fillcolor=(0, 0, 0))
    elif kind is TransformKind.SHEAR_X:
        out = _affine(im, (1, param, 0, 0, 1, 0))
    elif kind is TransformKind.SHEAR_Y:
        out = _affine(im, (1, 0, 0, param, 1, 0))
    elif kind is TransformKind.TRANSLATE_X:
        out = _affine(im, (1, 0, param, 0, 1, 0))
    elif kind is TransformKind.TRANSLATE_Y:
        out = _affine(im, (1, 0, 0, 0, 1, param))
    else:
        out = _ENHANCERS[kind](im).enhance(float(param))
    return np.asarray(out, dtype=np.uint8).copy()


def draw_ops(policy: AugmentPolicy, sample_seed: int) -> list[tuple[TransformKind, int]]:
    """The (kind, direction) sequence ``rand_augment`` would apply."""
    rng = np.random.default_rng([policy.seed & (2**64 - 1), sample_seed & (2**64 - 1)])
    kinds = rng.integers(0, len(ALL_KINDS), size=policy.num_ops)
    signs = rng.integers(0, 2, size=policy.num_ops)
    return [(ALL_KINDS[k], 1 if s else -1) for k, s in zip(kinds, signs)]


def rand_augment(image: np.ndarray, policy: AugmentPolicy, sample_seed: int) -> np.ndarray:
    out = image.copy()
    h, w = image.shape[:2]
    for kind, direction in draw_ops(policy, sample_seed):
        side = w if kind is TransformKind.TRANSLATE_X else h
        out = apply_transform(out, kind, magnitude_map(kind, policy.magnitude, direction, image_size=side))
    return out


# balancing -----------------------------------------------------------------------


@dataclass(frozen=True)
class PlannedCopy:
    source: int  # index into the input record list
    copy_index: int  # 1-based count of copies made from this source so far


@dataclass(frozen=True)
class BalancePlan:
    extra: tuple[int, ...]
    copies: tuple[PlannedCopy, ...]
    max_count: int

    def __len__(self) -> int:
        return len(self.copies)


def extra_counts(dist: ClassDistribution) -> tuple[int, ...]:
    """Copies each class needs to reach the largest class count."""
    counts = dist.counts
    if (counts < 1).any():
        empty = [dist.names[i] for i in np.flatnonzero(counts < 1)]
        raise ValueError(f"cannot balance empty classes: {', '.join(empty)}")
    target = int(counts.max())
    return tuple(int(target - n) for n in counts)


def balance_plan(dist: ClassDistribution, records: Sequence[SampleRecord], seed: int) -> BalancePlan:
    """Plan augmented copies that lift every class to the largest class count.

    Sources for each class are visited in a seeded shuffled order and cycled,
    so every original is reused either floor(extra/n) or ceil(extra/n) times.
    """
    extra = extra_counts(dist)
    by_class: dict[int, list[int]] = {c: [] for c in range(len(extra))}
    for i, r in enumerate(records):
        if r.expression >= 0:
            by_class[r.expression].append(i)
    for c, n in enumerate(dist.counts):
        if len(by_class[c]) != n:
            raise ValueError(f"class {dist.names[c]}: distribution says {n} records, found {len(by_class[c])}")
    copies = []
    used: dict[int, int] = {}
    for c, k in enumerate(extra):
        if k == 0:
            continue
        order = np.random.default_rng([seed, c]).permutation(by_class[c])
        for j in range(k):
            src = int(order[j % len(order)])
            used[src] = used.get(src, 0) + 1
            copies.append(PlannedCopy(src, used[src]))
    return BalancePlan(extra, tuple(copies), int(dist.counts.max()))


def copy_seed(source: int, copy_index: int) -> int:
    digest = hashlib.sha256(f"{source}:{copy_index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def augmented_name(path: str, copy_index: int) -> str:
    p = Path(path)
    return str(p.with_name(f"{p.stem}_aug{copy_index}.png").as_posix())


def materialize(
    plan: BalancePlan,
    policy: AugmentPolicy,
    records: Sequence[SampleRecord],
    src_manifest,
    out_dir,
    task: str,
) -> Path:
    """Render planned copies into ``out_dir`` and write the enlarged manifest.

    The output manifest lists the originals (paths rewritten relative to
    ``out_dir``) followed by the augmented copies in plan order.
    """
    src_root = Path(src_manifest).parent.resolve()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_root = out_dir.resolve()

    def rel(path: str) -> str:
        return Path(_relpath(src_root / path, out_root)).as_posix()

    out_records = [_with_path(r, rel(r.image_path)) for r in records]
    for c in plan.copies:
        src = records[c.source]
        image = load_image(src_root / src.image_path)
        aug = rand_augment(image, policy, copy_seed(c.source, c.copy_index))
        name = augmented_name(src.image_path, c.copy_index)
        target = out_root / "augmented" / name
        target.parent.mkdir(parents=True, exist_ok=True)
        save_png(target, aug)
        out_records.append(_with_path(src, Path("augmented", name).as_posix()))
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, out_records, task)
    atomic_write(out_dir / "augment_policy.txt", policy.sidecar())
    return manifest


def _relpath(target: Path, start: Path) -> str:
    return os.path.relpath(target, start)


def _with_path(r: SampleRecord, path: str) -> SampleRecord:
    return SampleRecord(path, r.expression, r.valence, r.arousal, r.aus)


# preprocessing ---------------------------------------------------------------------


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of an [H, W, C] array to [size, size, C] in float64.

    Pixel centres are aligned (half-pixel convention) with edge clamping; no
    antialiasing, so a 2x2 -> 1x1 shrink averages the four pixels.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (size, size):
        return img

    def axis(n_in):
        pos = (np.arange(size) + 0.5) * (n_in / size) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h)
    x0, x1, fx = axis(w)
    top = img[y0][:, x0] * (1 - fx)[None, :, None] + img[y0][:, x1] * fx[None, :, None]
    bot = img[y1][:, x0] * (1 - fx)[None, :, None] + img[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def preprocess(image: np.ndarray, mean, std, target_size: int) -> np.ndarray:
    """Resize, scale to [0, 1], normalise per channel; returns float32 [3, S, S].

    A channel whose std is 0 is only mean-centred.
    """
    x = resize_bilinear(image, target_size) / 255.0
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    safe = np.where(std > 0, std, 1.0)
    x = (x - mean) / safe
    return np.ascontiguousarray(x.transpose(2, 0, 1), dtype=np.float32)
