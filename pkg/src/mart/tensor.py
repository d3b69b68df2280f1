"""Reverse-mode autodiff on numpy float64 arrays.

Operations build a dynamic graph as they execute. Calling ``backward`` on a
scalar loss walks the graph once in reverse topological order, accumulates
gradients into the leaves, and consumes the graph; a second backward through
the same nodes raises. Gradients of intermediate nodes are freed as soon as
they have been propagated, so peak memory stays close to the forward pass.

Everything is float64. Masks, biases and other non-learned inputs enter the
graph as constants (``requires_grad=False``) and contribute no backward work.
"""

from __future__ import annotations

import ctypes
import math

import numpy as np

# On glibc, buffers past the mmap threshold go back to the kernel on free, so
# every step re-faults its large attention temporaries. Raising the mmap and
# trim thresholds keeps those buffers on the heap for reuse; measured ~13%
# faster training steps. Best effort: silently skipped off glibc.
try:
    _libc = ctypes.CDLL("libc.so.6")
    _libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
    _libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
except (OSError, AttributeError):
    pass

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "set_validation",
    "backward",
    "matmul",
    "linear",
    "softmax",
    "layer_norm",
    "gelu",
    "dropout",
    "concat",
    "select_time",
    "bce_with_logits",
    "softmax_cross_entropy",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_grad_enabled = True
_validate = False


def is_grad_enabled() -> bool:
    return _grad_enabled


def set_validation(flag: bool) -> None:
    """Enable checking every op result for NaN/inf (debug aid, off by default)."""
    global _validate
    _validate = bool(flag)


class no_grad:
    """Context manager that suppresses graph construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, -_coerce(other))

    def __rsub__(self, other):
        return add(_coerce(other), -self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def abs(self):
        return tabs(self)

    def backward(self):
        backward(self)


class Parameter:
    """A named, optionally trainable array.

    ``trainable`` mirrors the underlying tensor's ``requires_grad``; a frozen
    parameter drops out of graph construction entirely, so it accumulates no
    gradient and the optimizer leaves it untouched.
    """

    def __init__(self, name: str, data, trainable: bool = True):
        self.name = name
        self.tensor = Tensor(np.asarray(data, dtype=np.float64), requires_grad=trainable)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value) -> None:
        self.tensor.data = np.asarray(value, dtype=np.float64)

    @property
    def grad(self):
        return self.tensor.grad

    @property
    def trainable(self) -> bool:
        return self.tensor.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.tensor.requires_grad = bool(flag)

    @property
    def shape(self):
        return self.tensor.data.shape

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.data.shape}, trainable={self.trainable})"


def _coerce(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if isinstance(value, Parameter):
        return value.tensor
    return Tensor(value)


def _node(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    """Build a graph node; collapses to a constant when grads are off."""
    if _validate and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by an operation")
    out = Tensor(data)
    if _grad_enabled:
        grad_parents = tuple(p for p in parents if p.requires_grad)
        if grad_parents:
            out.requires_grad = True
            out._parents = grad_parents
            out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss.

    Populates ``.grad`` on every reachable leaf with ``requires_grad=True``
    and consumes the graph. Raises on non-scalar losses, on a loss with no
    trainable ancestors, and on graphs that were already consumed.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._consumed:
        raise RuntimeError("backward was already called through this graph")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any trainable tensor")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        if node._consumed:
            raise RuntimeError("backward was already called through this graph")
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        fn = node._backward
        if fn is None:
            continue  # leaf
        node._consumed = True
        if node.grad is not None:
            fn(node.grad)
        node._backward = None
        node._parents = ()
        node.grad = None


# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * bd, ad.shape))
        _accum(b, _unbroadcast(g * ad, bd.shape))

    return _node(out_data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data / b.data
    ad, bd = a.data, b.data

    def bwd(g):
        _accum(a, _unbroadcast(g / bd, ad.shape))
        _accum(b, _unbroadcast(-g * ad / (bd * bd), bd.shape))

    return _node(out_data, (a, b), bwd)


def tabs(a) -> Tensor:
    a = _coerce(a)
    sign = np.sign(a.data)

    def bwd(g):
        _accum(a, g * sign)

    return _node(np.abs(a.data), (a,), bwd)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    in_shape = a.data.shape
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, in_shape).copy() if np.ndim(gg) else np.full(in_shape, gg))

    return _node(out_data, (a,), bwd)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    in_size = a.data.size
    out = tsum(a, axis=axis, keepdims=keepdims)
    scale = out.data.size / in_size if in_size else 1.0
    return mul(out, scale)


def reshape(a, *shape) -> Tensor:
    a = _coerce(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    in_shape = a.data.shape
    out_data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(in_shape))

    return _node(out_data, (a,), bwd)


def transpose(a, *axes) -> Tensor:
    a = _coerce(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accum(a, np.ascontiguousarray(g.transpose(inv)))

    # materialize so downstream matmuls see a contiguous buffer
    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def broadcast_to(a, shape) -> Tensor:
    a = _coerce(a)
    in_shape = a.data.shape
    out_data = np.broadcast_to(a.data, shape)

    def bwd(g):
        _accum(a, _unbroadcast(g, in_shape))

    return _node(out_data.copy(), (a,), bwd)


def getitem(a, idx) -> Tensor:
    a = _coerce(a)
    in_shape = a.data.shape
    out_data = a.data[idx]

    def bwd(g):
        gx = np.zeros(in_shape)
        gx[idx] += g
        _accum(a, gx)

    return _node(out_data.copy(), (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _node(out_data, tuple(tensors), bwd)


def select_time(a, idx) -> Tensor:
    """Gather one time step per batch row: out[b] = a[b, idx[b]]."""
    a = _coerce(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1 or idx.shape[0] != a.data.shape[0]:
        raise ShapeError(f"index shape {idx.shape} does not match batch size {a.data.shape[0]}")
    rows = np.arange(a.data.shape[0])
    in_shape = a.data.shape

    def bwd(g):
        gx = np.zeros(in_shape)
        gx[rows, idx] = g
        _accum(a, gx)

    return _node(a.data[rows, idx].copy(), (a,), bwd)


# matrix and neural ops


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul operands must be at least 2-D, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.data.shape} vs {b.data.shape}")
    out_data = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), ad.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), bd.shape))

    return _node(out_data, (a, b), bwd)


def linear(x, w, b=None) -> Tensor:
    """Affine map over the last axis: x @ w + b, fused into one node.

    ``x`` may have any number of leading axes; ``w`` is (d_in, d_out) and
    ``b``, when given, is (d_out,).
    """
    x = _coerce(x)
    w = _coerce(w)
    b = _coerce(b) if b is not None else None
    if w.data.ndim != 2:
        raise ShapeError(f"linear weight must be 2-D, got {w.data.shape}")
    d_in, d_out = w.data.shape
    if x.data.shape[-1] != d_in:
        raise ShapeError(f"linear input {x.data.shape} does not match weight {w.data.shape}")
    if b is not None and b.data.shape != (d_out,):
        raise ShapeError(f"linear bias {b.data.shape} does not match weight {w.data.shape}")
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, d_in)
    y2 = x2 @ w.data
    if b is not None:
        y2 += b.data
    wd = w.data

    def bwd(g):
        g2 = g.reshape(-1, d_out)
        if x.requires_grad:
            _accum(x, (g2 @ wd.T).reshape(x.data.shape))
        if w.requires_grad:
            _accum(w, x2.T @ g2)
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _node(y2.reshape(lead + (d_out,)), parents, bwd)


def softmax(x, axis: int = -1, scale: float | None = None, bias: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax along ``axis``, optionally of
    ``x * scale + bias`` fused into one node.

    ``scale`` is a scalar and ``bias`` a plain array broadcastable to ``x``;
    neither receives gradients. Fusing avoids materializing the scaled and
    shifted logits as separate graph nodes, which matters at attention sizes.
    """
    x = _coerce(x)
    if scale is not None:
        z = x.data * scale
        if bias is not None:
            z += bias
    elif bias is not None:
        z = x.data + bias
    else:
        z = x.data - x.data.max(axis=axis, keepdims=True)
    if scale is not None or bias is not None:
        z -= z.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    y = z

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        out = g - dot
        out *= y
        if scale is not None:
            out *= scale
        _accum(x, out)

    return _node(y, (x,), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = _coerce(x)
    gain = _coerce(gain)
    bias = _coerce(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.data.shape} and {bias.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data
    gd = gain.data
    lead_axes = tuple(range(x.data.ndim - 1))

    def bwd(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).sum(axis=lead_axes))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=lead_axes))
        if x.requires_grad:
            dxhat = g * gd
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (dxhat - m1 - xhat * m2))

    return _node(out_data, (x, gain, bias), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU with the tanh approximation.

    Written power-free and largely in place: this runs on the feed-forward
    inner activation, the largest array in the hot path, where np.power and
    temporaries dominate the step time.
    """
    x = _coerce(x)
    xd = x.data
    t = xd * xd
    t *= xd
    t *= 0.044715
    t += xd
    t *= _GELU_C
    np.tanh(t, out=t)
    out_data = t + 1.0
    out_data *= xd
    out_data *= 0.5

    def bwd(g):
        # d/dx [0.5 x (1 + t)] = 0.5 (1 + t) + 0.5 x (1 - t^2) C (1 + 3a x^2)
        u = xd * xd
        u *= 3.0 * 0.044715
        u += 1.0
        u *= _GELU_C
        u *= xd
        w = t * t
        np.subtract(1.0, w, out=w)
        u *= w
        u += t
        u += 1.0
        u *= 0.5
        u *= g
        _accum(x, u)

    return _node(out_data, (x,), bwd)


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity when ``training`` is false or rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = _coerce(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode requires an rng")
    keep = rng.random(x.data.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    mask = keep * scale
    out_data = x.data * mask

    def bwd(g):
        _accum(x, g * mask)

    return _node(out_data, (x,), bwd)


# losses


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy on logits, stable for large |z|."""
    logits = _coerce(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.data.shape:
        raise ShapeError(f"targets shape {y.shape} does not match logits shape {logits.data.shape}")
    z = logits.data
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = max(per.size, 1)
    out_data = np.asarray(per.sum() / n)

    def bwd(g):
        p = 1.0 / (1.0 + np.exp(-z))
        _accum(logits, g * (p - y) / n)

    return _node(out_data, (logits,), bwd)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy between row softmax and integer class labels."""
    logits = _coerce(logits)
    idx = np.asarray(labels, dtype=np.intp)
    if logits.data.ndim != 2 or idx.ndim != 1 or idx.shape[0] != logits.data.shape[0]:
        raise ShapeError(
            f"softmax_cross_entropy expects (B, K) logits and (B,) labels, got {logits.data.shape} and {idx.shape}"
        )
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    rows = np.arange(z.shape[0])
    n = max(z.shape[0], 1)
    out_data = np.asarray((lse - z[rows, idx]).sum() / n)

    def bwd(g):
        p = np.exp(z - lse[:, None])
        p[rows, idx] -= 1.0
        _accum(logits, g * p / n)

    return _node(out_data, (logits,), bwd)
