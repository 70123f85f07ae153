"""Dense tensors with tape-based reverse-mode differentiation.

Storage is 32-bit by default. Reductions accumulate in 64-bit and cast back.
Only scalar broadcasting is supported; every other binary op requires equal
shapes. Operations are recorded on the active :class:`Tape` whenever at least
one input requires a gradient; with no active tape nothing is recorded.

>>> x = Tensor([1.0, 2.0], requires_grad=True)
>>> with Tape() as tape:
...     loss = sum_(mul(x, x))
>>> tape.backward(loss)
>>> x.grad.tolist()
[2.0, 4.0]
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "precision",
    "default_dtype",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "elementwise",
    "matmul",
    "add_rowvec",
    "conv2d",
    "avg_pool2",
    "conv2d_pool",
    "relu",
    "tanh",
    "sigmoid",
    "softmax",
    "activation",
    "log",
    "sum_",
    "mean",
    "mean_cols",
    "reduce",
    "reshape",
    "take_rows",
    "column",
    "gather",
    "backward",
]


class ShapeError(ValueError):
    pass


_local = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the storage dtype of newly created tensors.

    Used by the finite-difference harness to evaluate oracles in 64-bit.
    """
    prev = default_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = prev


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or default_dtype(), copy=True, order="C")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr)
        t.grad = None
        t.requires_grad = False
        t.node_id = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t: Tensor):
    raise ShapeError(f"expected a scalar tensor, got shape {t.shape}")


class _Record:
    __slots__ = ("inputs", "out", "backward")

    def __init__(self, inputs, out, backward):
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest, the innermost one records.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._outputs: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.tapes.pop()

    def __len__(self) -> int:
        return len(self.records)

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        for t in inputs:
            if t.requires_grad and id(t) not in self._outputs:
                self._leaves.setdefault(id(t), t)
        out.requires_grad = True
        out.node_id = len(self.records)
        self.records.append(_Record(tuple(inputs), out, backward))
        self._outputs.add(id(out))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf seen.

        Gradients add onto existing ``.grad`` buffers; callers zero them
        between steps.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {}
        if loss.requires_grad:
            if id(loss) not in self._outputs:
                raise ValueError("loss was not produced on this tape")
            grads[id(loss)] = np.ones_like(loss.data)
            for rec in reversed(self.records):
                g = grads.pop(id(rec.out), None)
                if g is None:
                    continue
                for inp, gi in zip(rec.inputs, rec.backward(g)):
                    if gi is None or not inp.requires_grad:
                        continue
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
        for key, leaf in self._leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=default_dtype()))


def _emit(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor._wrap(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward)
    return out


def _sum64(x: np.ndarray, axis=None) -> np.ndarray:
    return np.sum(x, axis=axis, dtype=np.float64).astype(x.dtype)


# elementwise -----------------------------------------------------------------


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor, bool]:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.shape == b.shape:
        return a, b, False
    if b.size == 1:
        return a, b, True
    raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, b: Tensor, broadcast: bool) -> np.ndarray:
    return _sum64(g).reshape(b.shape) if broadcast else g


def add(a, b) -> Tensor:
    a, b, bc = _binary_operands(a, b, "add")
    bv = b.data.reshape(()) if bc else b.data
    return _emit(a.data + bv, (a, b), lambda g: (g, _reduce_to(g, b, bc)))


def sub(a, b) -> Tensor:
    a, b, bc = _binary_operands(a, b, "sub")
    bv = b.data.reshape(()) if bc else b.data
    return _emit(a.data - bv, (a, b), lambda g: (g, _reduce_to(-g, b, bc)))


def mul(a, b) -> Tensor:
    a, b, bc = _binary_operands(a, b, "mul")
    bv = b.data.reshape(()) if bc else b.data
    return _emit(a.data * bv, (a, b), lambda g: (g * bv, _reduce_to(g * a.data, b, bc)))


def div(a, b) -> Tensor:
    a, b, bc = _binary_operands(a, b, "div")
    bv = b.data.reshape(()) if bc else b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / bv

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return g / bv, _reduce_to(-g * a.data / (bv * bv), b, bc)

    return _emit(out, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a: Tensor, b=None) -> Tensor:
    if op_kind == "neg":
        return neg(a)
    if op_kind in ("scale", "scale-by-constant"):
        return scale(a, b)
    try:
        return _ELEMENTWISE[op_kind](a, b)
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None


# linear algebra ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner mismatch {a.shape} @ {b.shape}")
    return _emit(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Add a length-D vector to every row of an [N, D] matrix."""
    if x.ndim != 2 or v.shape != (x.shape[1],):
        raise ShapeError(f"add_rowvec: {x.shape} + {v.shape}")
    return _emit(x.data + v.data, (x, v), lambda g: (g, _sum64(g, axis=0)))


# convolution -------------------------------------------------------------------


def _im2col(x: np.ndarray) -> np.ndarray:
    # [N, C, H, W] -> [N, C, 9, H, W] of zero-padded 3x3 neighbourhoods
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 9, h, w), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, i * 3 + j] = xp[:, :, i : i + h, j : j + w]
    return cols


def _col2im(cols: np.ndarray) -> np.ndarray:
    n, c, _, h, w = cols.shape
    xp = np.zeros((n, c, h + 2, w + 2), dtype=cols.dtype)
    for i in range(3):
        for j in range(3):
            xp[:, :, i : i + h, j : j + w] += cols[:, :, i * 3 + j]
    return xp[:, :, 1:-1, 1:-1]


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (spatial size preserved)."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if h < 3 or w < 3:
        raise ShapeError(f"conv2d needs H,W >= 3, got {x.shape}")
    if kernels.ndim != 4 or kernels.shape[1:] != (c, 3, 3):
        raise ShapeError(f"kernels must be [F,{c},3,3], got {kernels.shape}")
    f = kernels.shape[0]
    if bias.shape != (f,):
        raise ShapeError(f"bias must be [{f}], got {bias.shape}")
    cols = _im2col(x.data).reshape(n, c * 9, h * w)
    kmat = kernels.data.reshape(f, c * 9)
    out = np.matmul(kmat, cols) + bias.data[None, :, None]

    def back(g):
        g = g.reshape(n, f, h * w)
        dk = np.einsum("nfp,nkp->fk", g, cols, optimize=True).reshape(kernels.shape)
        db = _sum64(g, axis=(0, 2))
        dcols = np.matmul(kmat.T, g).reshape(n, c, 9, h, w)
        return _col2im(dcols), dk, db

    return _emit(out.reshape(n, f, h, w), (x, kernels, bias), back)


def avg_pool2(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2 input must be [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even H and W, got {x.shape}")
    quarter = x.dtype.type(0.25)
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)) * quarter

    def back(g):
        return (np.repeat(np.repeat(g * quarter, 2, axis=2), 2, axis=3),)

    return _emit(out, (x,), back)


def conv2d_pool(x: Tensor, kernels: Tensor, bias: Tensor, pool: str = "none") -> Tensor:
    out = conv2d(x, kernels, bias)
    if pool == "avg2":
        return avg_pool2(out)
    if pool != "none":
        raise ValueError(f"unknown pool {pool!r}")
    return out


# activations -------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def _open_unit(dtype) -> tuple:
    # largest value below 1 and smallest normal above 0 for the dtype
    return np.nextafter(dtype.type(1), dtype.type(0)), np.finfo(dtype).tiny


def tanh(x: Tensor) -> Tensor:
    """tanh kept strictly inside (-1, 1), which float32 would otherwise reach."""
    hi, _ = _open_unit(x.dtype)
    y = np.clip(np.tanh(x.data), -hi, hi)
    return _emit(y, (x,), lambda g: (g * (1 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    hi, lo = _open_unit(x.dtype)
    y = np.clip(np.where(d >= 0, 1 / (1 + e), e / (1 + e)), lo, hi).astype(x.dtype)
    return _emit(y, (x,), lambda g: (g * y * (1 - y),))


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis of a rank-2 tensor."""
    if x.ndim != 2:
        raise ShapeError(f"softmax expects rank 2, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z.astype(np.float64))
    y = (e / e.sum(axis=1, keepdims=True)).astype(x.dtype)

    def back(g):
        dot = _sum64(g * y, axis=1)[:, None]
        return (y * (g - dot),)

    return _emit(y, (x,), back)


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, "softmax-rows": softmax, "softmax": softmax}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def log(x: Tensor, floor: float = 1e-12) -> Tensor:
    """Natural log with the input clamped from below at ``floor``.

    The clamp is a true clamp: the gradient is zero where it is active.
    """
    lo = x.dtype.type(floor)
    # written as "not below" so NaN passes through instead of being clamped
    active = ~(x.data <= lo)
    safe = np.where(active, x.data, lo)
    return _emit(np.log(safe), (x,), lambda g: (np.where(active, g / safe, 0).astype(x.dtype),))


# reductions --------------------------------------------------------------------


def _nonempty(x: Tensor, op: str) -> None:
    if x.size == 0:
        raise ShapeError(f"{op} of an empty tensor")


def sum_(x: Tensor) -> Tensor:
    _nonempty(x, "sum")
    out = _sum64(x.data)
    return _emit(out, (x,), lambda g: (np.full(x.shape, g.reshape(()), dtype=x.dtype),))


def mean(x: Tensor) -> Tensor:
    _nonempty(x, "mean")
    n = x.size
    out = (np.sum(x.data, dtype=np.float64) / n).astype(x.dtype)
    return _emit(out, (x,), lambda g: (np.full(x.shape, g.reshape(()) / n, dtype=x.dtype),))


def mean_cols(x: Tensor) -> Tensor:
    """Mean over rows of an [N, D] tensor, giving [D]."""
    _nonempty(x, "mean_cols")
    if x.ndim != 2:
        raise ShapeError(f"mean_cols expects rank 2, got {x.shape}")
    n = x.shape[0]
    out = (np.sum(x.data, axis=0, dtype=np.float64) / n).astype(x.dtype)
    return _emit(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),))


_REDUCTIONS = {"sum": sum_, "mean": mean, "mean-per-column": mean_cols}


def reduce(kind: str, x: Tensor) -> Tensor:
    try:
        fn = _REDUCTIONS[kind]
    except KeyError:
        raise ValueError(f"unknown reduction {kind!r}") from None
    return fn(x)


# shape and indexing --------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return _emit(out, (x,), lambda g: (g.reshape(x.shape),))


def take_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(x.data[idx], (x,), back)


def column(x: Tensor, j: int) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"column expects rank 2, got {x.shape}")

    def back(g):
        full = np.zeros_like(x.data)
        full[:, j] = g
        return (full,)

    return _emit(x.data[:, j].copy(), (x,), back)


def gather(x: Tensor, index) -> Tensor:
    """Pick ``x[b, index[b]]`` for each row b of a rank-2 tensor."""
    if x.ndim != 2:
        raise ShapeError(f"gather expects rank 2, got {x.shape}")
    index = np.asarray(index, dtype=np.intp)
    if index.shape != (x.shape[0],):
        raise ShapeError(f"gather index shape {index.shape} vs rows {x.shape[0]}")
    rows = np.arange(x.shape[0])

    def back(g):
        full = np.zeros_like(x.data)
        full[rows, index] = g
        return (full,)

    return _emit(x.data[rows, index], (x,), back)
