"""float64 tensors with reverse-mode automatic differentiation.

Every operation validates its operand shapes up front and raises ValueError
naming them; the only sanctioned broadcasts are scalar-with-anything and
matrix-plus-row-vector (bias addition). Arrays are row-major and are never
mutated by the graph, so forward values and gradients are bit-reproducible
for identical inputs.
"""
from __future__ import annotations

import math

import numpy as np

LN_EPS = 1e-5


class Tensor:
    """Dense array plus one node of the implicitly recorded backward graph."""

    __slots__ = ("data", "grad", "name", "_parents", "_backward")

    def __init__(self, data, _parents=(), _backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _acc(t: Tensor, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)  # copy: g may be a view
    else:
        t.grad += g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def back(g):
            _acc(a, g)
            _acc(b, g)
    elif b.shape == ():
        def back(g):
            _acc(a, g)
            _acc(b, g.sum())
    elif a.shape == ():
        def back(g):
            _acc(a, g.sum())
            _acc(b, g)
    elif len(a.shape) == 2 and b.shape == (a.shape[1],):
        def back(g):
            _acc(a, g)
            _acc(b, g.sum(axis=0))
    else:
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return Tensor(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def back(g):
            _acc(a, g)
            _acc(b, -g)
    elif b.shape == ():
        def back(g):
            _acc(a, g)
            _acc(b, -g.sum())
    elif a.shape == ():
        def back(g):
            _acc(a, g.sum())
            _acc(b, -g)
    else:
        raise ValueError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return Tensor(a.data - b.data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return Tensor(-a.data, (a,), lambda g: _acc(a, -g))


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)) and not isinstance(a, (int, float)):
        a = as_tensor(a)
        c = float(b)
        return Tensor(a.data * c, (a,), lambda g: _acc(a, g * c))
    if isinstance(a, (int, float)):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def back(g):
            _acc(a, g * b.data)
            _acc(b, g * a.data)
    elif b.shape == ():
        def back(g):
            _acc(a, g * b.data)
            _acc(b, (g * a.data).sum())
    elif a.shape == ():
        def back(g):
            _acc(a, (g * b.data).sum())
            _acc(b, g * a.data)
    else:
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return Tensor(a.data * b.data, (a, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    return Tensor(a.data @ b.data, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if len(a.shape) != 2:
        raise ValueError(f"transpose: rank-2 tensor required, got shape {a.shape}")
    return Tensor(a.data.T, (a,), lambda g: _acc(a, g.T))


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape) if not isinstance(shape, tuple) else shape
    if math.prod(shape) != a.data.size:
        raise ValueError(f"reshape: cannot view shape {a.shape} as {shape}")
    old = a.shape
    return Tensor(a.data.reshape(shape), (a,), lambda g: _acc(a, g.reshape(old)))


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis of a rank-1 or rank-2 tensor."""
    a = as_tensor(a)
    rank = len(a.shape)
    if rank not in (1, 2) or axis >= rank:
        raise ValueError(f"narrow: axis {axis} invalid for shape {a.shape}")
    if not (0 <= start < stop <= a.shape[axis]):
        raise ValueError(f"narrow: range [{start}:{stop}] invalid for shape {a.shape}")
    idx = (slice(start, stop),) if axis == 0 else (slice(None), slice(start, stop))

    def back(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _acc(a, full)

    return Tensor(a.data[idx].copy(), (a,), back)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat: empty input list")
    rank = len(parts[0].shape)
    for p in parts:
        if len(p.shape) != rank:
            raise ValueError(f"concat: rank mismatch {parts[0].shape} vs {p.shape}")
    sizes = [p.shape[axis] for p in parts]

    def back(g):
        off = 0
        for p, n in zip(parts, sizes):
            idx = (slice(off, off + n),) if axis == 0 else (slice(None), slice(off, off + n))
            _acc(p, g[idx])
            off += n

    return Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), back)


def tsum(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        return Tensor(a.data.sum(), (a,), lambda g: _acc(a, np.full(a.shape, g)))
    shape = a.shape

    def back(g):
        _acc(a, np.broadcast_to(np.expand_dims(g, axis), shape))

    return Tensor(a.data.sum(axis=axis), (a,), back)


def tmean(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
        return Tensor(a.data.mean(), (a,), lambda g: _acc(a, np.full(a.shape, g / n)))
    n = a.shape[axis]
    shape = a.shape

    def back(g):
        _acc(a, np.broadcast_to(np.expand_dims(g / n, axis), shape))

    return Tensor(a.data.mean(axis=axis), (a,), back)


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor(out, (a,), lambda g: _acc(a, g * (1.0 - out * out)))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Smooth tanh-form gelu."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)

    def back(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        _acc(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner))

    return Tensor(0.5 * x * (1.0 + t), (a,), back)


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(a.data)
    return Tensor(out, (a,), lambda g: _acc(a, g * 0.5 / out))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data > floor
    return Tensor(np.maximum(a.data, floor), (a,), lambda g: _acc(a, g * mask))


def softmax(a: Tensor, axis: int) -> Tensor:
    a = as_tensor(a)
    if axis >= len(a.shape) or a.shape[axis] == 0:
        raise ValueError(f"softmax: axis {axis} empty or invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _acc(a, out * (g - dot))

    return Tensor(out, (a,), back)


def log_softmax(a: Tensor, axis: int) -> Tensor:
    a = as_tensor(a)
    if axis >= len(a.shape) or a.shape[axis] == 0:
        raise ValueError(f"log_softmax: axis {axis} empty or invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def back(g):
        _acc(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return Tensor(out, (a,), back)


def layer_norm(a: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then optionally
    apply a learned per-feature affine. gain=None/bias=None is the
    parameter-free variant."""
    a = as_tensor(a)
    feat = a.shape[-1] if a.shape else 0
    if feat == 0:
        raise ValueError(f"layer_norm: empty feature axis in shape {a.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    if gain is None and bias is None:
        def back(g):
            gm = g - g.mean(axis=-1, keepdims=True)
            _acc(a, inv * (gm - xhat * (g * xhat).mean(axis=-1, keepdims=True)))

        return Tensor(xhat, (a,), back)

    if gain is None or bias is None:
        raise ValueError("layer_norm: gain and bias must be given together")
    if gain.shape != (feat,) or bias.shape != (feat,):
        raise ValueError(
            f"layer_norm: affine shapes {gain.shape}/{bias.shape} do not match feature dim {feat}")

    def back(g):
        _acc(gain, (g * xhat).reshape(-1, feat).sum(axis=0))
        _acc(bias, g.reshape(-1, feat).sum(axis=0))
        gg = g * gain.data
        gm = gg - gg.mean(axis=-1, keepdims=True)
        _acc(a, inv * (gm - xhat * (gg * xhat).mean(axis=-1, keepdims=True)))

    return Tensor(xhat * gain.data + bias.data, (a, gain, bias), back)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted Bernoulli dropout; callers skip this entirely in eval mode."""
    a = as_tensor(a)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate {rate} outside [0, 1)")
    if rate == 0.0:
        return a
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return Tensor(a.data * mask, (a,), lambda g: _acc(a, g * mask))


def _topo_order(root: Tensor):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-mode pass from a scalar loss; accumulates into .grad fields."""
    if loss.shape != ():
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data):
        raise ValueError("backward: loss is not finite")
    order = _topo_order(loss)
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def gradients(loss: Tensor, params: dict) -> dict:
    """Gradient map for named parameters; exact zeros for parameters with no
    path to the loss."""
    for t in params.values():
        t.grad = None
    backward(loss)
    return {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
            for k, t in params.items()}


def add_gradient_maps(maps, scale: float = 1.0) -> dict:
    """Order-independent-up-to-roundoff summation of per-utterance gradient maps."""
    total: dict = {}
    for m in maps:
        for k, g in m.items():
            if k in total:
                total[k] = total[k] + g
            else:
                total[k] = g.copy()
    if scale != 1.0:
        for k in total:
            total[k] *= scale
    return total
