"""Dense tensor value, reverse-mode tape and finite-difference oracle.

Every operation in the engine goes through :class:`Tensor`.  When at least one
input was registered on a :class:`Tape` (via :meth:`Tape.watch`), the op
records a node carrying a vector-Jacobian closure; otherwise it only computes
the forward value.  Inference and verification therefore share one code path.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NonFinite, NotOnTape, ShapeMismatch


class Precision(enum.Enum):
    SINGLE = "single"
    DOUBLE = "double"

    @property
    def dtype(self):
        return np.float32 if self is Precision.SINGLE else np.float64

    @classmethod
    def of(cls, dtype) -> "Precision":
        dtype = np.dtype(dtype)
        if dtype == np.float32:
            return cls.SINGLE
        if dtype == np.float64:
            return cls.DOUBLE
        raise TypeError(f"unsupported element type {dtype}")


def _freeze(arr: np.ndarray) -> np.ndarray:
    if arr.flags.writeable:
        arr = arr.view()
        arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable dense array of float32 or float64 values.

    Activations are rank-4 ``(n, c, h, w)`` in row-major order; attention
    internals use lower or higher ranks, so rank is not enforced here.
    """

    __slots__ = ("data", "tape", "id")

    def __init__(self, data, precision: Precision | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if precision is None:
            src = np.asarray(data)
            dtype = src.dtype if src.dtype in (np.float32, np.float64) else np.float32
        else:
            dtype = precision.dtype
        arr = np.ascontiguousarray(data, dtype=dtype)
        if arr is data:
            arr = arr.view()
        self.data = _freeze(arr)
        self.tape: Tape | None = None
        self.id: int | None = None

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

    @property
    def precision(self) -> Precision:
        return Precision.of(self.data.dtype)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f", tape_id={self.id}" if self.id is not None else ""
        return f"Tensor(shape={self.shape}, precision={self.precision.value}{tag})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        if dtype is None or x.dtype == dtype:
            return x
        # Casting drops tape membership by design; callers must cast before watching.
        return Tensor(x.data.astype(dtype))
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def arr(x, dtype=None) -> np.ndarray:
    """Raw array view of a tensor or array-like, optionally cast."""
    a = x.data if isinstance(x, Tensor) else np.asarray(x)
    if dtype is not None and a.dtype != dtype:
        a = a.astype(dtype)
    return a


@dataclass
class Node:
    op: str
    inputs: tuple[int | None, ...]
    output: int
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Append-only record of primitive applications, for one verification run."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.gradients: dict[int, np.ndarray] = {}
        self._values: dict[int, Tensor] = {}
        self._leaves: list[int] = []

    def _register(self, t: Tensor) -> Tensor:
        t.tape = self
        t.id = len(self._values)
        self._values[t.id] = t
        return t

    def watch(self, x, precision: Precision | None = None) -> Tensor:
        """Register ``x`` as a differentiable leaf and return the taped copy."""
        t = Tensor(arr(x), precision)
        self._register(t)
        self._leaves.append(t.id)
        return t

    def value(self, vid: int) -> Tensor:
        try:
            return self._values[vid]
        except KeyError:
            raise NotOnTape(f"value id {vid} is not on this tape") from None

    def grad(self, t: Tensor) -> np.ndarray:
        if t.tape is not self:
            raise NotOnTape("tensor was not recorded on this tape")
        return self.gradients[t.id]

    def __len__(self):
        return len(self.nodes)


def _record(op: str, inputs: Sequence, out: np.ndarray, vjp) -> Tensor:
    tape = None
    for t in inputs:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("inputs belong to different tapes")
    result = Tensor(out)
    if tape is None:
        return result
    tape._register(result)
    ids = tuple(t.id if isinstance(t, Tensor) and t.tape is tape else None for t in inputs)
    tape.nodes.append(Node(op, ids, result.id, vjp))
    return result


def backward(tape: Tape, output) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``output`` (Tensor or value id)."""
    out_id = output.id if isinstance(output, Tensor) else output
    if out_id is None or (isinstance(output, Tensor) and output.tape is not tape):
        raise NotOnTape("output was not produced on this tape")
    out = tape.value(out_id)
    if out.size != 1:
        raise ShapeMismatch(f"backward needs a scalar output, got shape {out.shape}")

    grads: dict[int, np.ndarray] = {out_id: np.ones(out.shape, dtype=out.dtype)}
    for node in reversed(tape.nodes):
        if node.output > out_id:
            continue
        g = grads.get(node.output)
        if g is None:
            continue
        for vid, gi in zip(node.inputs, node.vjp(g)):
            if vid is None or gi is None:
                continue
            shape = tape.value(vid).shape
            if gi.shape != shape:
                raise ShapeMismatch(f"{node.op}: gradient shape {gi.shape} != value shape {shape}")
            if vid in grads:
                grads[vid] = grads[vid] + gi
            else:
                grads[vid] = gi
    for leaf in tape._leaves:
        if leaf not in grads and leaf < out_id:
            v = tape.value(leaf)
            grads[leaf] = np.zeros(v.shape, dtype=v.dtype)
    tape.gradients = grads
    return grads


# --------------------------------------------------------------------------
# primitives


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")
    if a.dtype != b.dtype:
        raise ShapeMismatch(f"{op}: precisions {a.precision.value} and {b.precision.value} differ")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may also be a Python scalar."""
    a = as_tensor(a)
    if np.isscalar(b):
        s = a.dtype.type(b)
        return _record("scale", (a,), a.data * s, lambda g: (g * s,))
    b = as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype
    out = np.asarray(a.data.sum(dtype=dtype), dtype=dtype).reshape(())
    return _record("sum", (a,), out, lambda g: (np.broadcast_to(g, shape).astype(dtype),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(src),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _record("transpose", (a,), out, lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat_channels(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeMismatch("concat_channels expects rank-4 tensors")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeMismatch(f"concat_channels: {a.shape} and {b.shape} disagree outside channels")
    if a.dtype != b.dtype:
        raise ShapeMismatch("concat_channels: precisions differ")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _record("concat", (a, b), out, lambda g: (g[:, :ca].copy(), g[:, ca:].copy()))


def slice_channels(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _record("slice", (a,), a.data[:, start:stop].copy(), vjp)


def softmax_rows(m) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    m = as_tensor(m)
    if m.shape[-1] < 1:
        raise ShapeMismatch("softmax_rows needs at least one column")
    if not np.all(np.isfinite(m.data)):
        raise NonFinite("softmax_rows input contains NaN or Inf")
    z = m.data - m.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (m,), p, vjp)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or a.ndim != b.ndim:
        raise ShapeMismatch(f"matmul: ranks {a.ndim} and {b.ndim}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeMismatch("matmul: precisions differ")
    ad, bd = a.data, b.data

    def vjp(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return _record("matmul", (a, b), ad @ bd, vjp)


# --------------------------------------------------------------------------
# oracles and helpers


def finite_diff_grad(f: Callable[[Tensor], object], x, eps: float = 1e-4) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    base = np.array(arr(x), dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.empty_like(flat)

    def value(v):
        out = f(Tensor(v))
        return float(arr(out).reshape(-1)[0]) if not np.isscalar(out) else float(out)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = value(base)
        flat[i] = orig - eps
        lo = value(base)
        flat[i] = orig
        grad[i] = (hi - lo) / (2 * eps)
    return Tensor(grad.reshape(base.shape))


def make_rng(seed: int) -> np.random.Generator:
    """Seeded 64-bit generator; the stream is identical on every platform."""
    return np.random.Generator(np.random.PCG64(seed & 0xFFFFFFFFFFFFFFFF))


def randn(shape, seed_or_rng, precision: Precision = Precision.SINGLE) -> Tensor:
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else make_rng(seed_or_rng)
    return Tensor(rng.standard_normal(shape), precision)


def zeros(shape, precision: Precision = Precision.SINGLE) -> Tensor:
    return Tensor(np.zeros(shape), precision)
