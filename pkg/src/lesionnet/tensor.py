"""Float64 tensors with an eagerly recorded graph for reverse-mode differentiation.

Every operation that touches a tensor with ``requires_grad`` appends a
:class:`Node` carrying a monotonically increasing sequence number.  Insertion
order is therefore a valid topological order, and :func:`backward` walks the
reachable nodes in decreasing sequence order.  The graph is released once
backward has run.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import AxisError, GraphError, RankError, ShapeError, SizeError

_uids = itertools.count()
_seqs = itertools.count()
_local = threading.local()


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "seq")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_seqs)

    def __repr__(self):
        return f"Node({self.op!r}, seq={self.seq})"


class Tensor:
    """An N-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node", "uid")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None
        self.uid = next(_uids)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr, dtype=np.float64)
        t.grad = None
        t.requires_grad = requires_grad
        t.node = None
        t.uid = next(_uids)
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the contents."""
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise RankError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        return backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return add(neg(self), _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``op``.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    Nothing is recorded when no input requires a gradient or recording is
    disabled.
    """
    track = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=track)
    if track:
        out.node = Node(op, tuple(inputs), backward_fn)
    return out


# -- construction -----------------------------------------------------------


def create(shape: Sequence[int], fill=0.0, requires_grad: bool = False) -> Tensor:
    """Build a tensor of ``shape`` from a scalar fill or a flat value list."""
    shape = tuple(int(d) for d in shape)
    if not shape or any(d < 1 for d in shape):
        raise SizeError(f"shape must be non-empty with positive dims, got {list(shape)}")
    n = math.prod(shape)
    if np.isscalar(fill):
        arr = np.full(shape, float(fill))
    else:
        flat = np.asarray(fill, dtype=np.float64).reshape(-1)
        if flat.size != n:
            raise SizeError(f"{flat.size} values cannot fill shape {list(shape)}")
        arr = flat.reshape(shape)
    return Tensor(arr, requires_grad=requires_grad)


def zeros(shape, requires_grad=False) -> Tensor:
    return create(shape, 0.0, requires_grad)


def ones(shape, requires_grad=False) -> Tensor:
    return create(shape, 1.0, requires_grad)


# -- elementwise ------------------------------------------------------------


def _binary_shapes(a: Tensor, b: Tensor) -> bool:
    """Return True when ``b`` is broadcast as a scalar."""
    if a.shape == b.shape:
        return False
    if b.size == 1:
        return True
    raise ShapeError(f"incompatible shapes {list(a.shape)} and {list(b.shape)}")


def _reduce_to(g: np.ndarray, scalar: bool, shape) -> np.ndarray:
    return np.full(shape, g.sum()) if scalar else g


def add(a: Tensor, b: Tensor) -> Tensor:
    scalar = _binary_shapes(a, b)
    bd = b.data.reshape(()) if scalar else b.data

    def bw(g):
        return g, _reduce_to(g, scalar, b.shape)

    return record("add", a.data + bd, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    scalar = _binary_shapes(a, b)
    bd = b.data.reshape(()) if scalar else b.data

    def bw(g):
        return g, -_reduce_to(g, scalar, b.shape)

    return record("sub", a.data - bd, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    scalar = _binary_shapes(a, b)
    ad = a.data
    bd = b.data.reshape(()) if scalar else b.data

    def bw(g):
        gb = g * ad
        return g * bd, (np.full(b.shape, gb.sum()) if scalar else gb)

    return record("mul", ad * bd, (a, b), bw)


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def neg(a: Tensor) -> Tensor:
    return record("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, factor: float) -> Tensor:
    return record("scale", a.data * factor, (a,), lambda g: (g * factor,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return record("log", np.log(ad), (a,), lambda g: (g / ad,))


# -- linear algebra / reductions -------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {list(a.shape)} x {list(b.shape)}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return record("matmul", ad @ bd, (a, b), bw)


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return record("sum", np.array([a.data.sum()]), (a,), lambda g: (np.full(shape, g[0]),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return record("mean", np.array([a.data.mean()]), (a,), lambda g: (np.full(shape, g[0] / n),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise SizeError(str(exc)) from None
    return record("reshape", out.copy(), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise AxisError(f"axis {axis} invalid for rank {x.ndim}")
    return axis % x.ndim


def softmax_array(x: np.ndarray, axis: int) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    y = softmax_array(x.data, axis)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", y, (x,), bw)


# -- activations ------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of the Gaussian error linear unit."""
    xd = x.data
    t = np.tanh(_GELU_C * (xd + 0.044715 * xd**3))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return record("gelu", out, (x,), bw)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"unknown activation {kind!r}")


# -- differentiation --------------------------------------------------------


def backward(loss: Tensor, retain_graph: bool = False) -> dict:
    """Propagate d(loss)/d(t) into ``t.grad`` for every tensor the loss depends on.

    Returns a map ``uid -> gradient array`` covering every participating
    tensor.  Leaf gradients accumulate into existing ``grad`` arrays;
    gradients that never reach a participating tensor are zero.
    """
    if loss.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        raise GraphError("loss is not attached to a recorded graph")

    seen = {loss.uid: loss}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node is None:
            continue
        for p in t.node.inputs:
            if p.requires_grad and p.uid not in seen:
                seen[p.uid] = p
                stack.append(p)

    interior = sorted((t for t in seen.values() if t.node is not None), key=lambda t: -t.node.seq)
    grads = {uid: np.zeros_like(t.data) for uid, t in seen.items()}
    grads[loss.uid] = np.ones_like(loss.data)

    for t in interior:
        g = grads[t.uid]
        for p, pg in zip(t.node.inputs, t.node.backward_fn(g)):
            if pg is not None and p.requires_grad:
                grads[p.uid] += pg

    for uid, t in seen.items():
        g = grads[uid]
        t.grad = g.copy() if t.grad is None else t.grad + g
    if not retain_graph:
        for t in interior:
            t.node = None
    return grads


def finite_difference_gradient(
    f: Callable[[Tensor], Tensor], x: Tensor, epsilon: float = 1e-5
) -> Tensor:
    """Central-difference estimate of the gradient of scalar ``f`` at ``x``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = x.data.reshape(-1)
    out = np.empty_like(base)
    with no_grad():
        probe = f(Tensor(x.data))
        if probe.size != 1:
            raise RankError(f"f must return a scalar, got shape {list(probe.shape)}")
        for i in range(base.size):
            plus = base.copy()
            plus[i] += epsilon
            minus = base.copy()
            minus[i] -= epsilon
            fp = f(Tensor(plus.reshape(x.shape))).item()
            fm = f(Tensor(minus.reshape(x.shape))).item()
            out[i] = (fp - fm) / (2.0 * epsilon)
    return Tensor._wrap(out.reshape(x.shape))
