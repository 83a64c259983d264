"""Dense tensors with tape-ordered reverse-mode autodiff.

Every op that touches a tensor with ``requires_grad`` records a node carrying a
monotonically increasing sequence number. ``backward`` replays the reachable
nodes in exact reverse creation order, which is the append order of the tape.
"""
from __future__ import annotations

import contextlib
import itertools
import os
from typing import Callable, Optional, Sequence

import numpy as np

_seq = itertools.count()
_grad_enabled = True
DEBUG = os.environ.get("MOBILEX_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, a: tuple, b: tuple):
        super().__init__(f"{op}: shape mismatch {tuple(a)} vs {tuple(b)}")
        self.op = op
        self.shapes = (tuple(a), tuple(b))


class NumericError(FloatingPointError):
    pass


def set_debug(flag: bool) -> None:
    """Toggle the non-finite check that runs after every forward op."""
    global DEBUG
    DEBUG = bool(flag)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class _Node:
    __slots__ = ("op", "parents", "backward", "seq")

    def __init__(self, op, parents, backward, seq):
        self.op = op
        self.parents = parents
        self.backward = backward
        self.seq = seq


class Tensor:
    """N-dimensional float array with an optional gradient buffer.

    Storage is float32 unless a float64 array is passed in explicitly; the
    64-bit path exists for gradient-check oracles.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._ctx: Optional[_Node] = None

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # -- operators ------------------------------------------------------------
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
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self):
        return sum_(self)

    def mean(self):
        return mean(self)

    def relu(self):
        return relu(self)

    def abs(self):
        return abs_(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if DEBUG and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise NumericError(f"{op} produced non-finite values from finite inputs")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._ctx = _Node(op, tuple(parents), grad_fn, next(_seq))
    return out


def _same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) and not isinstance(x, bool)


# -- elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    if _is_scalar(b):
        c = b
        return _make(a.data + a.dtype.type(c), (a,), lambda g: (g,), "add_scalar")
    b = as_tensor(b, a)
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -b)
    b = as_tensor(b, a)
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        c = a.dtype.type(b)
        return _make(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    b = as_tensor(b, a)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2 * ad * g,), "square")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    for hook in _relu_hooks:
        hook(mask)
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


# Observers of ReLU masks; gradient checkers use them to detect kink crossings.
_relu_hooks: list = []


# -- reductions and shape ops ---------------------------------------------------

def sum_(a: Tensor) -> Tensor:
    total = np.sum(a.data, dtype=np.float64).astype(a.dtype)
    shape = a.shape
    return _make(np.asarray(total), (a,), lambda g: (np.broadcast_to(g, shape).astype(g.dtype),), "sum")


def mean(a: Tensor) -> Tensor:
    return mul(sum_(a), 1.0 / a.size)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[idx] = g
        return (out,)

    return _make(np.array(a.data[idx]), (a,), grad_fn, "getitem")


def pad2d(a: Tensor, bottom: int, right: int) -> Tensor:
    """Zero-pad the last two axes on the bottom/right edges."""
    if bottom == 0 and right == 0:
        return a
    h, w = a.shape[-2:]
    widths = [(0, 0)] * (a.ndim - 2) + [(0, bottom), (0, right)]
    return _make(np.pad(a.data, widths), (a,), lambda g: (g[..., :h, :w],), "pad2d")


# -- backward -----------------------------------------------------------------

def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("root does not require grad")
    if root._ctx is None:
        _accumulate(root, np.ones_like(root.data))
        return

    nodes = []
    seen = set()
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or t._ctx is None:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(p for p in t._ctx.parents if p.requires_grad)
    nodes.sort(key=lambda t: t._ctx.seq, reverse=True)

    grads = {id(root): np.ones_like(root.data)}
    for t in nodes:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        for p, pg in zip(t._ctx.parents, t._ctx.backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._ctx is None:
                _accumulate(p, pg)
            elif id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
    if leaf.grad is None:
        leaf.grad = g.copy()
    else:
        leaf.grad = leaf.grad + g
