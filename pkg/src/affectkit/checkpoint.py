"""Binary checkpoint format.

Layout (all integers little-endian uint32)::

    b"AFKT" | version | entry count
    per entry: name length | UTF-8 name | rank | dims... | float32 payload
    metadata length | UTF-8 "key=value" lines

Payloads are stored as little-endian float32 and round-trip bit for bit.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import atomic_write

MAGIC = b"AFKT"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


def encode(entries: Mapping[str, np.ndarray], metadata: Mapping[str, object]) -> bytes:
    parts = [MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise CheckpointError(f"entry {name!r} has dtype {arr.dtype}; checkpoints hold float32 only")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(arr.astype("<f4", copy=False).tobytes(order="C"))
    meta = "".join(f"{k}={v}\n" for k, v in metadata.items()).encode("utf-8")
    parts += [_U32.pack(len(meta)), meta]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes for {what} at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}; not an affectkit checkpoint")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    entries: dict[str, np.ndarray] = {}
    for _ in range(r.u32("entry count")):
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        dims = tuple(r.u32(f"dims of {name}") for _ in range(rank))
        n = int(np.prod(dims, dtype=np.int64))
        payload = r.take(4 * n, f"payload of {name}")
        entries[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    meta_raw = r.take(r.u32("metadata length"), "metadata").decode("utf-8")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after metadata at offset {r.pos}")
    metadata = {}
    for line in meta_raw.splitlines():
        k, _, v = line.partition("=")
        metadata[k] = v
    return entries, metadata


def save_checkpoint(path, entries: Mapping[str, np.ndarray], metadata: Mapping[str, object]) -> None:
    atomic_write(path, encode(entries, metadata))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return decode(Path(path).read_bytes())
