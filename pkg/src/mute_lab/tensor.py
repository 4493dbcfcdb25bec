"""Dense tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` and, while gradients are
enabled, records its inputs and a local gradient rule.  The recorded
graph is an implicit DAG reachable from any result; :func:`backward`
replays it in reverse topological order and accumulates gradients
additively into every ``requires_grad`` ancestor.

Tensors are immutable after forward construction except for their
``grad`` buffer.  A graph and its tensors must stay on one thread during
``backward``; independent graphs may run on distinct threads.

Only leading batch dimensions broadcast.  All computations preserve the
dtype of their inputs; parameters are created in the configured float
width (double by default, and double in every verification suite).
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import ContractError, ShapeError

_grad_enabled = [True]


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


def grad_enabled() -> bool:
    return _grad_enabled[-1]


class Tensor:
    """A dense n-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Small operator sugar; scalars are folded in directly.
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def parameter(data, requires_grad: bool = True) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data)


def _node(data, parents, grad_fn) -> Tensor:
    """Build an op result, recording the graph edge if gradients are on."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled[-1] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(data, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _node(data, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    """Rectifier; the subgradient at exactly zero is defined as zero."""
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def abs_(a: Tensor) -> Tensor:
    """Absolute value with subgradient zero at zero entries."""
    s = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (g * s,))


def sqrt_(a: Tensor) -> Tensor:
    root = np.sqrt(a.data)

    def grad_fn(g):
        return (g * (0.5 / root),)

    return _node(root, (a,), grad_fn)


# ---------------------------------------------------------------------------
# shape and reduction ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,),
                 lambda g: (g.transpose(inverse),))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _node(data, (a,), grad_fn)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the two trailing axes."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} vs {b.data.shape}")
    data = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _node(data, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# normalization and softmax family
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis`` (max subtraction before exponent)."""
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _node(y, (a,), grad_fn)


def masked_softmax(a: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis with ``True`` mask entries excluded.

    Excluded positions get weight exactly zero.  A row with every key
    masked cannot be normalized and raises :class:`ContractError`.
    """
    masked = np.where(mask, -np.inf, a.data)
    peak = masked.max(axis=-1, keepdims=True)
    if np.isneginf(peak).any():
        raise ContractError("softmax row has every position masked")
    e = np.exp(masked - peak)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _node(y, (a,), grad_fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def grad_fn(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _node(y, (a,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} "
                         f"do not match feature width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes)
        dbias = g.sum(axis=reduce_axes)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        return dx, dgain, dbias

    return _node(out, (x, gain, bias), grad_fn)


# ---------------------------------------------------------------------------
# indexed access
# ---------------------------------------------------------------------------

def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add into the table."""
    ids = np.asarray(ids)
    data = table.data[ids]

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _node(data, (table,), grad_fn)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Per-batch row gather: ``out[b, i] = x[b, index[b, i]]``."""
    index = np.asarray(index)
    if x.data.ndim != 3 or index.shape != x.data.shape[:2]:
        raise ShapeError(f"gather_rows expects [B,n,d] with index [B,n], got "
                         f"{x.data.shape} and {index.shape}")
    batch = np.arange(x.data.shape[0])[:, None]
    data = x.data[batch, index]

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (batch, index), g)
        return (gx,)

    return _node(data, (x,), grad_fn)


def index0(a: Tensor, i: int) -> Tensor:
    """Select slot ``i`` along the leading axis."""
    data = a.data[i]

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        ga[i] = g
        return (ga,)

    return _node(data, (a,), grad_fn)


def stack0(tensors) -> Tensor:
    """Stack same-shaped tensors along a new leading axis."""
    tensors = tuple(tensors)
    data = np.stack([t.data for t in tensors])

    def grad_fn(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _node(data, tensors, grad_fn)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` ancestor of ``loss``.

    Gradients accumulate additively when a tensor feeds several
    consumers.  Tensors outside the ancestry are untouched (an absent
    ``grad`` buffer reads as zero).
    """
    if loss.data.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    flowing = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for node in reversed(topo):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._grad_fn is None:
            continue
        for p, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in flowing:
                flowing[key] = flowing[key] + pg
            else:
                flowing[key] = pg
