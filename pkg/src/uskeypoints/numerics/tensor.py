"""Dense tensors with a dynamic reverse-mode gradient tape."""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


class DimensionError(ValueError):
    """Raised on incompatible tensor shapes; message names the offending axes."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


_BRANCH_LOG: Optional[list] = None


@contextlib.contextmanager
def record_branches():
    """Collect the branch taken by every ReLU and max inside the block.

    Yields a list that fills with one byte string per non-smooth op. Two
    evaluations with equal lists lie in the same smooth piece of the function.
    """
    global _BRANCH_LOG
    prev, log = _BRANCH_LOG, []
    _BRANCH_LOG = log
    try:
        yield log
    finally:
        _BRANCH_LOG = prev


class Tensor:
    """An n-d float array that can take part in the gradient tape.

    Parameters
    ----------
    data : array_like
        Values; converted to ``dtype`` (float32 unless the input is float64).
    requires_grad : bool
        Leaf tensors with this flag receive ``.grad`` after ``backward``.
    """

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data)
        if dtype is None:
            dtype = np.float64 if arr.dtype == np.float64 else DEFAULT_DTYPE
        # ascontiguousarray would promote 0-d input to shape (1,)
        self.data = np.ascontiguousarray(arr, dtype=dtype).reshape(arr.shape)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._consumed = False

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Return a tape-free copy sharing no gradient history (stop-gradient)."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # ------------------------------------------------------------- arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # ---------------------------------------------------------------- backward
    def backward(self) -> None:
        """Propagate d(self)/d(leaf) into every reachable ``requires_grad`` leaf.

        ``self`` must be a scalar produced on the tape. Leaf gradients must have
        been cleared (``zero_grad``) since the previous backward pass.
        """
        if self.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("backward called twice on the same graph")
        order = _topological(self)
        leaves = [t for t in order if t.is_leaf and t.requires_grad]
        if not leaves:
            raise RuntimeError("loss is not on the gradient tape")
        stale = [t for t in leaves if t.grad is not None]
        if stale:
            names = ", ".join(t.name or repr(t) for t in stale[:5])
            raise RuntimeError(f"gradients not zeroed before backward: {names}")

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    if not np.all(np.isfinite(g)):
                        raise NonFiniteError(f"non-finite gradient for {node.name or node!r}")
                    node.grad = g.astype(node.data.dtype, copy=False)
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if not node.is_leaf:
                node._consumed = True
                node._backward = _consumed_backward
        self._consumed = True


def _consumed_backward(g):
    raise RuntimeError("backward called twice on the same graph")


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def make_result(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    """Wrap ``data`` as an op output, recording it on the tape if needed."""
    parents = tuple(parents)
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise
def _binary(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    ref = a if isinstance(a, Tensor) else b
    return as_tensor(a, ref), as_tensor(b, ref)


def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    return make_result(a.data + b.data, (a, b),
                       lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    return make_result(a.data - b.data, (a, b),
                       lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b),
                       lambda g: (unbroadcast(g * bd, a.shape) if a.requires_grad else None,
                                  unbroadcast(g * ad, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    ad, bd = a.data, b.data
    return make_result(ad / bd, (a, b),
                       lambda g: (unbroadcast(g / bd, a.shape) if a.requires_grad else None,
                                  unbroadcast(-g * ad / (bd * bd), b.shape) if b.requires_grad else None))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return make_result(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    if _BRANCH_LOG is not None:
        _BRANCH_LOG.append(np.packbits(mask).tobytes())
    return make_result(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype)
    sig = expit(x)
    return make_result(out, (a,), lambda g: (g * sig,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary(a, b)
    ad, bd = a.data, b.data
    return make_result(ad @ bd, (a, b),
                       lambda g: (g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None,
                                  np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None))


# ----------------------------------------------------------------- reductions
def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    axes = range(a.ndim) if axis is None else (axis if isinstance(axis, tuple) else (axis,))
    count = int(np.prod([shape[ax] for ax in axes]))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return make_result(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), back)


def tmax(a: Tensor, axis, keepdims=False) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal element."""
    x = a.data
    idx = np.argmax(x, axis=axis)
    if _BRANCH_LOG is not None:
        _BRANCH_LOG.append(idx.tobytes())
    out = np.take_along_axis(x, np.expand_dims(idx, axis), axis=axis)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(x)
        np.put_along_axis(full, np.expand_dims(idx, axis), g, axis=axis)
        return (full,)

    return make_result(out if keepdims else np.squeeze(out, axis), (a,), back)


# ------------------------------------------------------------------- shaping
def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return make_result(np.array(a.data[idx]), (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_result(np.stack([t.data for t in tensors], axis=axis), tensors, back)
