"""Minimal reverse-mode autodiff over float64 numpy arrays.

Tensors record the operation that produced them; `backward` replays the
tape in reverse creation order. Everything is float64 so that analytic
gradients can be checked against central finite differences.
"""

import itertools

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError, NumericError

_counter = itertools.count()


class Tensor:
    """A float64 array with an optional gradient buffer and tape entry."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_idx")

    def __init__(self, data, requires_grad=False, _parents=(), _grad_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._grad_fn = _grad_fn
        self._idx = next(_counter)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (adjoint of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(data, parents, grad_fn):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req,
                  _parents=parents if req else (),
                  _grad_fn=grad_fn if req else None)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def grad_fn(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _make(out, (a, b), grad_fn)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def grad_fn(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _make(out, (a, b), grad_fn)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), grad_fn)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data / b.data
    except ValueError:
        raise DimensionError(f"div: shapes {a.shape} and {b.shape} do not broadcast")

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return (ga, gb)

    return _make(out, (a, b), grad_fn)


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)

    def grad_fn(g):
        return (g * c,)

    return _make(a.data * c, (a,), grad_fn)


def sigmoid(a):
    a = _as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), grad_fn)


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def grad_fn(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), grad_fn)


def gelu(a):
    """Exact (erf-based) GELU; smooth, so finite differences stay honest."""
    a = _as_tensor(a)
    out = kernels.gelu_forward(a.data)

    def grad_fn(g):
        return (kernels.gelu_grad(g, a.data),)

    return _make(out, (a,), grad_fn)


def log(a):
    a = _as_tensor(a)
    out = np.log(a.data)

    def grad_fn(g):
        return (g / a.data,)

    return _make(out, (a,), grad_fn)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims disagree, {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return (ga, gb)

    return _make(out, (a, b), grad_fn)


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def grad_fn(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(a.data, axes), (a,), grad_fn)


def reshape(a, shape):
    a = _as_tensor(a)
    orig = a.shape

    def grad_fn(g):
        return (g.reshape(orig),)

    return _make(a.data.reshape(shape), (a,), grad_fn)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), grad_fn)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along `axis`."""
    a = _as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), grad_fn)


def sum_(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), grad_fn)


def mean(a, axis, keepdims=False):
    a = _as_tensor(a)
    n = a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(out, (a,), grad_fn)


def softmax(a, axis=-1):
    """Numerically stable softmax along `axis`."""
    a = _as_tensor(a)
    # max() propagates NaN, so this doubles as the NaN-input check.
    if np.isnan(a.data.max()):
        raise NumericError("softmax: NaN in input")
    if axis in (-1, a.data.ndim - 1):
        out = kernels.softmax_rows(a.data)

        def grad_fn(g):
            return (kernels.softmax_rows_grad(g, out),)
    else:
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        ex = np.exp(shifted)
        out = ex / ex.sum(axis=axis, keepdims=True)

        def grad_fn(g):
            dot = (g * out).sum(axis=axis, keepdims=True)
            return ((g - dot) * out,)

    return _make(out, (a,), grad_fn)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then apply the affine (gain, bias)."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        gg = g * gain.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(x.data.ndim - 1))
        return (gx, (g * xhat).sum(axis=red), g.sum(axis=red))

    return _make(out, (x, gain, bias), grad_fn)


# ---------------------------------------------------------------------------
# backward pass and gradient checking


def backward(loss):
    """Accumulate gradients of a scalar `loss` into every requires_grad leaf."""
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # Reachable subgraph, replayed strictly in reverse creation order.
    seen = {loss}
    stack = [loss]
    nodes = []
    while stack:
        t = stack.pop()
        nodes.append(t)
        for p in t._parents:
            if p.requires_grad and p not in seen:
                seen.add(p)
                stack.append(p)
    nodes.sort(key=lambda t: t._idx, reverse=True)

    adjoint = {loss: np.ones_like(loss.data)}
    for t in nodes:
        g = adjoint.pop(t, None)
        if g is None:
            continue
        # Accumulation allocates, so the adjoint can be aliased directly;
        # nothing downstream mutates gradient buffers in place.
        t.grad = g if t.grad is None else t.grad + g
        if t._grad_fn is None:
            continue
        grads = t._grad_fn(g)
        for p, gp in zip(t._parents, grads):
            if not p.requires_grad:
                continue
            if p in adjoint:
                adjoint[p] = adjoint[p] + gp
            else:
                adjoint[p] = gp


def zero_grads(params):
    for p in params.values():
        p.zero_grad()


def finite_diff_check(fn, params, h=1e-5, samples_per_param=5, rng=None):
    """Max relative error between analytic and central-difference gradients.

    `fn` rebuilds the scalar loss from `params` (a dict of name -> Tensor);
    it is re-evaluated with coordinates perturbed by +/- h.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ContractError(f"step h={h} outside [1e-6, 1e-4]")
    rng = rng or np.random.default_rng(0)
    loss = fn()
    if not np.isfinite(loss.data).all():
        raise NumericError("finite_diff_check: non-finite loss")
    zero_grads(params)
    backward(loss)

    worst = 0.0
    for p in params.values():
        flat = p.data.reshape(-1)
        gflat = (p.grad if p.grad is not None
                 else np.zeros_like(p.data)).reshape(-1)
        n = flat.size
        idxs = (range(n) if n <= samples_per_param
                else rng.choice(n, size=samples_per_param, replace=False))
        for i in idxs:
            keep = flat[i]
            flat[i] = keep + h
            lo_hi = float(fn().data)
            flat[i] = keep - h
            lo_lo = float(fn().data)
            flat[i] = keep
            if not (np.isfinite(lo_hi) and np.isfinite(lo_lo)):
                raise NumericError("finite_diff_check: non-finite perturbed loss")
            cd = (lo_hi - lo_lo) / (2.0 * h)
            an = gflat[i]
            rel = abs(an - cd) / max(abs(an), abs(cd), 1e-8)
            worst = max(worst, rel)
    return worst
