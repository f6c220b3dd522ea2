"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the tiny ViT testbed needs are provided. Every operation
is a plain function taking and returning :class:`Tensor`; when a :class:`Tape`
is active on the current thread and any input requires a gradient, the
operation appends a record to the tape. ``Tape.backward`` replays the records
in reverse order.

    with Tape() as tape:
        y = matmul(x, w)
        loss = cross_entropy(y, labels)
    tape.backward(loss)
    w.grad
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

_local = threading.local()


class Tensor:
    """Immutable array of float64 values with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64).view()
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered log of differentiable operations recorded on this thread."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self, "tapes must be exited in LIFO order"
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, output: Tensor, grad: np.ndarray | None = None) -> None:
        """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""
        if grad is None:
            if output.data.size != 1:
                raise ValueError(f"backward needs an explicit grad for non-scalar output of shape {output.shape}")
            grad = np.ones_like(output.data)
        produced = {id(r.output) for r in self.records}
        pending: dict[int, np.ndarray] = {id(output): np.asarray(grad, dtype=np.float64)}
        if id(output) not in produced and output.requires_grad:
            _accumulate_leaf(output, pending.pop(id(output)))
            return
        for rec in reversed(self.records):
            g = pending.pop(id(rec.output), None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if id(t) in produced:
                    prev = pending.get(id(t))
                    pending[id(t)] = gi if prev is None else prev + gi
                else:
                    _accumulate_leaf(t, gi)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.broadcast_to(g, t.shape)
    t.grad = np.array(g, dtype=np.float64) if t.grad is None else t.grad + g


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def count_macs() -> Iterator[list[int]]:
    """Count multiply-accumulates performed by :func:`matmul` in this block.

    Yields a one-element list whose entry is updated in place.
    """
    prev = getattr(_local, "macs", None)
    counter = [0]
    _local.macs = counter
    try:
        yield counter
    finally:
        _local.macs = prev
        if prev is not None:
            prev[0] += counter[0]


@contextmanager
def paused_macs() -> Iterator[None]:
    """Exclude the enclosed matmuls from any active :func:`count_macs` block."""
    prev = getattr(_local, "macs", None)
    _local.macs = None
    try:
        yield
    finally:
        _local.macs = prev


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.records.append(_Record(tuple(inputs), out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# -- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    counter = getattr(_local, "macs", None)
    if counter is not None:
        counter[0] += int(out.size) * a.shape[-1]
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(np.matmul(g, _swap(bd)), ad.shape)
        if bd.ndim == 2 and ad.shape[:-2] == g.shape[:-2]:
            # shared weight matrix: fold the batch axes into one GEMM
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(_swap(ad), g), bd.shape)
        return ga, gb

    return _emit(out, (a, b), backward)


# -- elementwise --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = _as_tensor(x)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _emit(out, (x,), backward)


# -- reductions and shape ops --------------------------------------------------


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _emit(out, (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    inv = np.argsort(axes)
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def broadcast_to(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _emit(np.broadcast_to(x.data, shape), (x,), lambda g: (_unbroadcast(g, old),))


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return _emit(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def _check_index(idx, n: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"index out of range for extent {n}: {idx.tolist()}")
    if np.unique(idx).size != idx.size:
        raise ValueError(f"duplicate indices in selection: {idx.tolist()}")
    return idx


def take(x, idx, axis: int) -> Tensor:
    """Select unique entries ``idx`` along ``axis``; gradient scatters back, zero elsewhere."""
    x = _as_tensor(x)
    axis = axis % x.ndim
    idx = _check_index(idx, x.shape[axis])
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = idx
        full[tuple(sl)] = g
        return (full,)

    return _emit(np.take(x.data, idx, axis=axis), (x,), backward)


def gather_rows(x, idx) -> Tensor:
    """Rows ``idx`` of the trailing N x d matrix (leading batch axes kept)."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ValueError(f"gather_rows needs at least 2 axes, got shape {x.shape}")
    return take(x, idx, axis=-2)


# -- network primitives ----------------------------------------------------------


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit(s, (x,), backward)


def layernorm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    if eps <= 0:
        raise ValueError("layernorm eps must be positive")
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ValueError(f"layernorm affine parameters must have shape {x.shape[-1:]}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data

    def backward(g):
        gx = g * gd
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit(xhat * gd + beta.data, (x, gamma, beta), backward)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (B x C) against integer ``labels``."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy expects (B, C) logits and (B,) labels, got {logits.shape}, {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = logits.shape[0]
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / b,)

    return _emit(np.asarray(loss), (logits,), backward)
