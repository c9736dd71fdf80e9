"""Dense tensors with a reverse-mode differentiation tape and an Adam optimizer.

Every primitive checks shapes explicitly. The only implicit expansion allowed
is a trailing-shaped operand being repeated over leading batch axes (e.g. a
bias ``[n]`` added to ``[..., n]``), which keeps each gradient rule easy to
audit.

Operations record onto the innermost active :class:`Tape`::

    with Tape() as tape:
        loss = F.sum(F.mul(x, x))
    backward(loss, tape)
"""
from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

_dtype: type = np.float32
_tape_stack: list["Tape"] = []


class NumericError(FloatingPointError):
    """Raised when a NaN/Inf shows up in values, gradients or updates."""


class TapeError(RuntimeError):
    pass


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (float64 for grad checks)."""
    global _dtype
    old = _dtype
    _dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = old


def default_dtype():
    return _dtype


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=_dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended as operations execute, so the list is already in
    topological order; backward walks it once in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._cleared = False

    def __enter__(self) -> "Tape":
        if self._cleared:
            raise TapeError("tape reused after clear()")
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        if self._cleared:
            raise TapeError("tape reused after clear()")
        self.nodes.append(_Node(out, inputs, backward))

    def clear(self) -> None:
        self.nodes = []
        self._cleared = True

    def backward(self, loss: Tensor) -> None:
        if self._cleared:
            raise TapeError("backward on a cleared tape")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(n.out) for n in self.nodes}
        if id(loss) not in produced and not loss.requires_grad:
            raise TapeError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            node.out.grad = g
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # whatever is left are leaves (parameters / inputs)
        leaves = {}
        for node in self.nodes:
            for inp in node.inputs:
                leaves[id(inp)] = inp
        leaves[id(loss)] = loss
        for key, g in grads.items():
            t = leaves[key]
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {t!r}")
            t.grad = g.astype(t.data.dtype, copy=False) if t.grad is None else t.grad + g


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def _active() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = _active()
    if needs and tape is not None:
        tape.record(out, inputs, backward)
    return out


def _check_trailing(a: Tensor, b: Tensor, op: str) -> int:
    """Return number of leading axes b is expanded over; raise on mismatch."""
    if a.shape == b.shape:
        return 0
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return a.ndim - b.ndim
    raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_leading(g: np.ndarray, n: int) -> np.ndarray:
    return g.sum(axis=tuple(range(n))) if n else g


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    lead = _check_trailing(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, _reduce_leading(g, lead)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    lead = _check_trailing(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -_reduce_leading(g, lead)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    lead = _check_trailing(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (g * b.data, _reduce_leading(g * a.data, lead)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)  # a numpy float64 scalar would promote float32 data
    return _make(a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows, unlike 1 / (1 + exp(-x)) for large negative x
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a: Tensor) -> Tensor:
    sig = _sigmoid(a.data)
    y = a.data * sig
    return _make(y, (a,), lambda g: (g * (sig * (1.0 + a.data * (1.0 - sig))),))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    if a.shape != b.shape:
        raise ValueError(f"minimum: shape mismatch {a.shape} vs {b.shape}")
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (g * pick_a, g * ~pick_a))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------- reductions

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.asarray(a.data.mean()), (a,),
                 lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``[..., m, k] @ [k, n]`` or batched ``[..., m, k] @ [..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank>=2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch dimensions differ {a.shape} @ {b.shape}")
    y = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            k = a.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(y, (a, b), bw)


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    y = a.data.reshape(shape)
    if y.size != a.data.size:
        raise ValueError("reshape changes element count")
    return _make(y, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = tuple(parts)
    nd = parts[0].ndim
    axis = axis % nd
    for p in parts[1:]:
        if p.ndim != nd or p.shape[:axis] + p.shape[axis + 1:] != parts[0].shape[:axis] + parts[0].shape[axis + 1:]:
            raise ValueError(f"concat: incompatible shapes {[q.shape for q in parts]}")
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor (also used for embedding lookup)."""
    if a.ndim != 2:
        raise ValueError(f"take_rows expects a matrix, got {a.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"row index out of range for {a.shape[0]} rows")

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx.reshape(-1), g.reshape(-1, a.shape[1]))
        return (ga,)

    return _make(a.data[idx], (a,), bw)


embedding = take_rows


def gather(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick ``a[rows[j], cols[j]]`` for each j from a 2-D tensor."""
    if a.ndim != 2:
        raise ValueError(f"gather expects a matrix, got {a.shape}")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, cols), g)
        return (ga,)

    return _make(a.data[rows, cols], (a,), bw)


# ---------------------------------------------------------------- normalisation

def softmax_array(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Max-shifted softmax over the last axis; masked entries are exactly 0.

    Rows with every entry masked come out as all zeros.
    """
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=-1, keepdims=True)
    return e / np.where(s > 0, s, 1.0)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    y = softmax_array(x.data, mask)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw)


def log_softmax_array(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_softmax(x: Tensor) -> Tensor:
    y = log_softmax_array(x.data)
    p = np.exp(y)
    return _make(y, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ValueError(f"layer_norm: parameter shape must be ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data
    lead = x.ndim - 1

    def bw(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _reduce_leading(g * xhat, lead), _reduce_leading(g, lead)

    return _make(y, (x, gain, bias), bw)


def layer_norm_array(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps) * gain + bias


def silu_array(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid(x)


# ---------------------------------------------------------------- losses

def cross_entropy_from_logits(logits: Tensor, targets, weights=None,
                              reduction: str = "mean") -> Tensor:
    """Weighted token cross-entropy.

    ``reduction="mean"`` divides by the weight total (0 when all weights are 0);
    ``reduction="sum"`` returns the plain weighted sum.
    """
    if logits.ndim != 2:
        raise ValueError(f"logits must be [T, V], got {logits.shape}")
    t, v = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (t,):
        raise ValueError(f"targets must have shape ({t},)")
    if t and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target id outside vocabulary [0, {v})")
    w = np.ones(t, dtype=logits.data.dtype) if weights is None else \
        np.asarray(weights, dtype=logits.data.dtype)
    if w.shape != (t,):
        raise ValueError(f"weights must have shape ({t},)")
    if reduction == "mean":
        total = w.sum()
        w = w / total if total > 0 else np.zeros_like(w)
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    logp = log_softmax_array(logits.data)
    rows = np.arange(t)
    nll = -logp[rows, targets]
    loss = np.asarray((w * nll).sum())

    def bw(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (g * w[:, None] * p,)

    return _make(loss, (logits,), bw)


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_numeric: float = 1e-8
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update using each parameter's ``.grad``.

    Parameters with no gradient are skipped. A NaN/Inf gradient aborts the
    whole step before anything is modified.
    """
    live = [(i, p) for i, p in enumerate(params) if p.grad is not None]
    for i, p in live:
        if p.grad.shape != p.data.shape:
            raise ValueError(f"grad shape {p.grad.shape} != param shape {p.data.shape}")
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {p.name or i}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, p in live:
        g = p.grad
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps_numeric)).astype(p.data.dtype)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(np.sum([np.sum(p.grad.astype(np.float64) ** 2) for p in params])))
    if max_norm > 0 and total > max_norm:
        f = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * f
    return total


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- serialization

def write_array(fp: BinaryIO, arr: np.ndarray) -> int:
    """Write u32 rank, u32 extents, then little-endian float32 row-major data."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    fp.write(header)
    fp.write(arr.tobytes(order="C"))
    return len(header) + arr.nbytes


def read_array(fp: BinaryIO) -> np.ndarray:
    raw = fp.read(4)
    if len(raw) != 4:
        raise EOFError("truncated tensor header")
    (rank,) = struct.unpack("<I", raw)
    shape = struct.unpack(f"<{rank}I", fp.read(4 * rank))
    n = int(np.prod(shape, dtype=np.int64))
    buf = fp.read(4 * n)
    if len(buf) != 4 * n:
        raise EOFError("truncated tensor data")
    return np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32)
