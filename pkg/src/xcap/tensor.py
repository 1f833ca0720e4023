"""A small reverse-mode autodiff engine over numpy arrays.

Only the operator set the captioner needs is provided. Tensors are treated
as immutable values; every op returns a new Tensor that remembers its
parents and a closure mapping the upstream gradient to parent gradients.
"""
from __future__ import annotations

import contextlib
import hashlib
from typing import Callable, Iterable, Sequence

import numpy as np

_recording = True


class NonFiniteError(ValueError):
    """Raised when NaN or Inf reaches a graph boundary."""


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph (inference, finite differences)."""
    global _recording
    previous = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = previous


class Tensor:
    __slots__ = ("data", "name", "requires_grad", "_parents", "_backward")

    def __init__(self, data, name: str | None = None, requires_grad: bool = False):
        if isinstance(data, np.generic):
            data = np.asarray(data)
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.name = name
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_not_scalar(t: Tensor):
    raise ValueError(f"expected a scalar tensor, got shape {t.shape}")


def check_finite(array: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(array)):
        bad = int(np.size(array) - np.count_nonzero(np.isfinite(array)))
        raise NonFiniteError(f"{what} contains {bad} non-finite value(s)")
    return array


def constant(value, dtype=np.float64) -> Tensor:
    """Wrap an input array as a non-differentiable graph leaf."""
    if isinstance(value, Tensor):
        return value
    array = np.asarray(value, dtype=dtype)
    return Tensor(check_finite(array, "input"))


def parameter(value, name: str, dtype=None) -> Tensor:
    array = np.array(value, dtype=dtype if dtype is not None else np.asarray(value).dtype)
    return Tensor(check_finite(array, f"parameter {name!r}"), name=name, requires_grad=True)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return constant(x, dtype=dtype)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _recording and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = tuple(parents)
        out._backward = backward
        return out
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = a.dtype.type(factor)
    return _node(a.data * factor, (a,), lambda g: (g * factor,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so exp never overflows
    x = a.data
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` where ``b`` is a matrix or vector and ``a`` may carry leading batch axes."""
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if b.data.ndim not in (1, 2):
        raise ValueError(f"right operand must be 1-D or 2-D, got shape {b.shape}")
    n = b.shape[0]
    if a.shape[-1] != n:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if b.data.ndim == 1:
            if a.requires_grad:
                ga = g[..., None] * b.data
            if b.requires_grad:
                gb = a.data.reshape(-1, n).T @ g.reshape(-1)
        else:
            if a.requires_grad:
                ga = g @ b.data.T
            if b.requires_grad:
                gb = a.data.reshape(-1, n).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _node(a.data @ b.data, (a, b), backward)


def weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    """Per-batch convex reduction: ``(B, C)`` weights x ``(B, C, D)`` values -> ``(B, D)``."""
    w, v = weights.data, values.data

    def backward(g):
        gw = np.matmul(v, g[:, :, None])[:, :, 0] if weights.requires_grad else None
        gv = w[:, :, None] * g[:, None, :] if values.requires_grad else None
        return gw, gv

    return _node(np.matmul(w[:, None, :], v)[:, 0, :], (weights, values), backward)


# ---------------------------------------------------------------- structure

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    axis = axis % tensors[0].data.ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        parts = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            parts.append(g[tuple(index)] if t.requires_grad else None)
        return tuple(parts)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice along the last axis."""

    def backward(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _node(a.data[..., start:stop], (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _node(table.data[ids], (table,), backward)


def pick(a: Tensor, ids) -> Tensor:
    """Select ``a[b, ids[b]]`` from a ``(B, K)`` tensor."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def backward(g):
        full = np.zeros_like(a.data)
        full[rows, ids] = g
        return (full,)

    return _node(a.data[rows, ids], (a,), backward)


def total(a: Tensor) -> Tensor:
    return _node(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


# ---------------------------------------------------------------- probability

def softmax(v, axis: int = -1):
    """Numerically stable softmax.

    Accepts a Tensor (returns a Tensor, differentiable) or any array-like
    (returns an ndarray).
    """
    if not isinstance(v, Tensor):
        x = check_finite(np.asarray(v, dtype=np.float64), "softmax input")
        if x.size == 0:
            raise ValueError("softmax of an empty vector")
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)
    x = v.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (v,), backward)


def log_softmax(v: Tensor, axis: int = -1) -> Tensor:
    x = v.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (v,), backward)


def dropout(t: Tensor, keep_rate: float, rng: "RngStream | None", training: bool) -> Tensor:
    """Inverted dropout: kept units are scaled by ``1/keep_rate`` so inference is the identity."""
    if not 0.0 < keep_rate <= 1.0:
        raise ValueError(f"keep_rate must lie in (0, 1], got {keep_rate}")
    if not training or keep_rate == 1.0:
        return t
    if rng is None:
        raise ValueError("training-mode dropout needs an RngStream")
    keep = rng.uniform(t.shape) < keep_rate
    mask = keep.astype(t.dtype) / t.dtype.type(keep_rate)
    return _node(t.data * mask, (t,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reverse pass

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every named parameter leaf.

    Nothing is stored on the tensors, so calling this twice gives the same
    answer. Parameters in ``params`` that do not influence the loss get zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    check_finite(loss.data, "loss")
    grads: dict[str, np.ndarray] = {}
    if loss.requires_grad:
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_topological_order(loss)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.name is None:
                    continue
                if node.name in grads:
                    raise ValueError(f"duplicate parameter name {node.name!r}")
                grads[node.name] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg
    if params is not None:
        for p in params:
            if p.name not in grads:
                grads[p.name] = np.zeros_like(p.data)
    return grads


# ---------------------------------------------------------------- randomness

_MASK32 = 0xFFFFFFFF


def _path_words(path: Sequence[str]) -> list[int]:
    digest = hashlib.blake2b("\x1f".join(path).encode("utf-8"), digest_size=16).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


class RngStream:
    """Counter-based (Philox) random stream addressed by ``(seed, *path)``.

    Streams with distinct paths are independent, so the order in which
    consumers draw never changes anyone else's numbers.
    """

    def __init__(self, seed: int, *path):
        self.seed = int(seed)
        self.path = tuple(str(p) for p in path)
        entropy = [self.seed & _MASK32, (self.seed >> 32) & _MASK32, *_path_words(self.path)]
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
        self.counter = 0

    def child(self, *path) -> "RngStream":
        return RngStream(self.seed, *self.path, *path)

    def uniform(self, shape) -> np.ndarray:
        self.counter += 1
        return self._gen.random(shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        self.counter += 1
        return self._gen.normal(0.0, scale, size=shape)

    def integers(self, low: int, high: int, size=None):
        self.counter += 1
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        self.counter += 1
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path}, counter={self.counter})"
