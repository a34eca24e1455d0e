"""Minimal dense-tensor engine with reverse-mode differentiation.

Design notes
------------
* Every tensor wraps a contiguous ``numpy`` array of ``float64``; there is no
  dtype zoo and no device abstraction.  Values and gradients share one class:
  a ``Tensor`` is simultaneously the value node and the computation node
  (parents + backward rule), which keeps the graph a plain object graph.
* Ops never mutate operand data.  Leaf data may be rewritten between graph
  builds (that is how the optimizer and the finite-difference checker work),
  but a tensor participating in a live graph is treated as frozen.
* ``backward()`` runs an iterative topological sort from the loss node and
  calls each node's backward closure exactly once.  Gradients accumulate by
  summation, so shared subexpressions and multi-use leaves come out right.
* Graph recording can be suspended with ``no_grad()``; forward-only evaluation
  then allocates no closures and keeps no parents.
* With ``set_finite_checks(True)`` every op output is scanned for NaN/Inf and
  raises ``NonFiniteError`` on the first hit.  Off by default; the test suite
  switches it on.

Only the primitives the restoration models actually need are provided; the
convolution/normalization/pooling/DFT layer on top lives in ``ops``.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import NonFiniteError, ShapeError

_GRAD_ENABLED = True
_FINITE_CHECKS = False

# tanh-form GELU constants; the backward uses the exact derivative of this
# approximation, not of the erf form.
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def set_finite_checks(enabled: bool) -> None:
    """Toggle NaN/Inf scanning of every op output (costly; meant for tests)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Context manager that suspends graph recording."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A float64 n-dimensional array plus optional gradient bookkeeping.

    Parameters
    ----------
    data : array_like
        Anything ``np.asarray`` accepts; copied/cast to contiguous float64.
    requires_grad : bool
        Leaf flag.  Interior nodes derive it from their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = arr.copy()  # ascontiguousarray would promote 0-d to 1-d
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basic views ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying array (do not write through it)."""
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same data, no graph, no grad requirement."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autograd plumbing -------------------------------------------------

    def _accumulate(self, g: np.ndarray, own: bool = False) -> None:
        # own=True: the caller hands over a freshly computed array that no
        # other node aliases, so it may become the grad buffer outright.
        # Pass-through gradients (e.g. from add) must keep the copy.
        if self.grad is None:
            self.grad = g if own else np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar node.

        Fills ``grad`` on every reachable tensor with ``requires_grad``.
        Gradients are accumulated (summed); call ``zero_grad`` on leaves
        between independent sweeps.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    """Wrap ``x`` as a constant Tensor unless it already is one."""
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents) -> Tensor:
    """Build an interior node; prunes graph bookkeeping under no_grad."""
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError("op produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    rg = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = rg
    out._parents = tuple(parents) if rg else ()
    out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (the reverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g if g.shape == tuple(shape) else g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from e
    out = _node(data, (a, b))
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))
        out._backward = _bw
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from e
    out = _node(data, (a, b))
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.shape))
        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from e
    out = _node(data, (a, b))
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape), own=True)
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape), own=True)
        out._backward = _bw
    return out


def abs_(a) -> Tensor:
    """|a| with subgradient 0 at 0 (sign(0) == 0)."""
    a = as_tensor(a)
    out = _node(np.abs(a.data), (a,))
    if out.requires_grad:
        sign = np.sign(a.data)
        def _bw(g):
            a._accumulate(g * sign)
        out._backward = _bw
    return out


def relu(a) -> Tensor:
    """max(0, a); gradient 0 at exactly 0."""
    a = as_tensor(a)
    out = _node(np.maximum(a.data, 0.0), (a,))
    if out.requires_grad:
        mask = (a.data > 0.0).astype(np.float64)
        def _bw(g):
            a._accumulate(g * mask)
        out._backward = _bw
    return out


def gelu(a) -> Tensor:
    """Tanh-approximation GELU.

    ``0.5*x*(1 + tanh(c*(x + 0.044715*x**3)))`` with ``c = sqrt(2/pi)``.
    The backward is the exact analytic derivative of this approximation.
    """
    a = as_tensor(a)
    x = a.data
    u = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(u)
    out = _node(0.5 * x * (1.0 + t), (a,))
    if out.requires_grad:
        def _bw(g):
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
            d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            d *= g
            a._accumulate(d, own=True)
        out._backward = _bw
    return out


def sigmoid(a) -> Tensor:
    """Logistic function, computed in the numerically stable split form."""
    a = as_tensor(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = _node(y, (a,))
    if out.requires_grad:
        def _bw(g):
            a._accumulate(g * y * (1.0 - y))
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a, *shape) -> Tensor:
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from e
    out = _node(np.ascontiguousarray(data), (a,))
    if out.requires_grad:
        def _bw(g):
            a._accumulate(g.reshape(a.shape))
        out._backward = _bw
    return out


def transpose(a, *axes) -> Tensor:
    a = as_tensor(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if len(axes) != a.ndim:
        raise ShapeError(f"transpose: axes {axes} do not match rank of {a.shape}")
    inv = np.argsort(axes)
    out = _node(np.ascontiguousarray(a.data.transpose(axes)), (a,))
    if out.requires_grad:
        def _bw(g):
            a._accumulate(g.transpose(inv))
        out._backward = _bw
    return out


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} on axis {axis}") from e
    out = _node(data, tuple(tensors))
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        def _bw(g):
            parts = np.split(g, splits, axis=axis)
            for t, p in zip(tensors, parts):
                if t.requires_grad:
                    t._accumulate(p)
        out._backward = _bw
    return out


def pad2d(a, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the last two axes."""
    a = as_tensor(a)
    if min(top, bottom, left, right) < 0:
        raise ValueError(f"pad2d: negative pad ({top},{bottom},{left},{right})")
    width = [(0, 0)] * (a.ndim - 2) + [(top, bottom), (left, right)]
    out = _node(np.pad(a.data, width), (a,))
    if out.requires_grad:
        h, w = a.shape[-2], a.shape[-1]
        def _bw(g):
            a._accumulate(g[..., top:top + h, left:left + w])
        out._backward = _bw
    return out


def crop2d(a, height: int, width: int) -> Tensor:
    """Keep the top-left ``height x width`` corner of the last two axes."""
    a = as_tensor(a)
    if height > a.shape[-2] or width > a.shape[-1]:
        raise ShapeError(f"crop2d: {height}x{width} exceeds {a.shape}")
    out = _node(np.ascontiguousarray(a.data[..., :height, :width]), (a,))
    if out.requires_grad:
        def _bw(g):
            buf = np.zeros(a.shape, dtype=np.float64)
            buf[..., :height, :width] = g
            a._accumulate(buf)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# reductions, matmul, softmax
# ---------------------------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = _node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,))
    if out.requires_grad:
        def _bw(g):
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.shape))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(gg, a.shape))
        out._backward = _bw
    return out


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for i in ax:
            n *= a.shape[i]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible") from e
    out = _node(data, (a, b))
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accumulate(_unbroadcast(ga, a.shape), own=True)
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accumulate(_unbroadcast(gb, b.shape), own=True)
        out._backward = _bw
    return out


def softmax_lastdim(a) -> Tensor:
    """Row softmax over the last axis with max subtraction.

    Rows sum to 1; a constant shift added to a row leaves its output
    unchanged up to rounding.
    """
    a = as_tensor(a)
    x = a.data
    y = x - np.max(x, axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= np.sum(y, axis=-1, keepdims=True)
    out = _node(y, (a,))
    if out.requires_grad:
        def _bw(g):
            t = g * y
            dot = np.sum(t, axis=-1, keepdims=True)
            np.subtract(g, dot, out=t)
            t *= y
            a._accumulate(t, own=True)
        out._backward = _bw
    return out
