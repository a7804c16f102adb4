"""A small reverse-mode automatic differentiation engine over numpy arrays.

Only the kernels needed by the set encoder and the mixture loss are provided.
Every op computes its forward value eagerly and records a closure that maps
the output gradient to input gradients; :func:`gradients` runs those closures
in reverse topological order.

Arrays keep the dtype of their inputs: float64 for gradient checking, float32
is fine for training.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from . import kernels
from .errors import NumericError

_state = {"grad": True, "check_finite": True}


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    prev = _state["check_finite"]
    _state["check_finite"] = enabled
    try:
        yield
    finally:
        _state["check_finite"] = prev


class Array:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Array):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype.kind == "f" else np.float64
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward_fn = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Array(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __neg__ = lambda self: mul(self, -1.0)
    __matmul__ = lambda self, o: matmul(self, o)
    __getitem__ = lambda self, key: take(self, key)


def _lift(x, like: Array | None = None) -> Array:
    if isinstance(x, Array):
        return x
    dtype = like.dtype if like is not None else None
    return Array(np.asarray(x, dtype=dtype) if dtype is not None else x, dtype=dtype)


def _result(data, parents, backward_fn, op) -> Array:
    # NaN and inf propagate through a sum, so one reduction is enough
    if _state["check_finite"] and not np.isfinite(np.add.reduce(data, axis=None)):
        if not np.all(np.isfinite(data)):
            raise NumericError(f"non-finite values produced by '{op}'")
    out = Array.__new__(Array)
    out.data = data
    out.grad = None
    out.op = op
    track = _state["grad"] and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out.parents = tuple(parents) if track else ()
    out.backward_fn = backward_fn if track else None
    return out


def _accumulate(a: Array, g):
    if not a.requires_grad:
        return
    g = np.asarray(g, dtype=a.dtype)
    if g.shape != a.shape:
        g = np.broadcast_to(g, a.shape)
    # gradients may be shared between inputs, so never update them in place
    a.grad = g if a.grad is None else a.grad + g


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise

def add(a, b) -> Array:
    a = _lift(a, b if isinstance(b, Array) else None)
    b = _lift(b, a)

    def backward(g):
        _accumulate(a, unbroadcast(g, a.shape))
        _accumulate(b, unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Array:
    a = _lift(a, b if isinstance(b, Array) else None)
    b = _lift(b, a)

    def backward(g):
        _accumulate(a, unbroadcast(g, a.shape))
        _accumulate(b, unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Array:
    a = _lift(a, b if isinstance(b, Array) else None)
    b = _lift(b, a)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward, "mul")


def scale(a: Array, s: float) -> Array:
    def backward(g):
        _accumulate(a, g * s)

    return _result(a.data * a.dtype.type(s), (a,), backward, "scale")


def exp(a: Array) -> Array:
    y = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * y)

    return _result(y, (a,), backward, "exp")


def log(a: Array) -> Array:
    def backward(g):
        _accumulate(a, g / a.data)

    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)
    return _result(y, (a,), backward, "log")


def sqrt(a: Array) -> Array:
    with np.errstate(invalid="ignore"):
        y = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g * 0.5 / y)

    return _result(y, (a,), backward, "sqrt")


def clip_min(a: Array, floor: float) -> Array:
    """``max(a, floor)``; the gradient passes where ``a >= floor``."""
    keep = a.data >= floor

    def backward(g):
        _accumulate(a, g * keep)

    return _result(np.maximum(a.data, a.dtype.type(floor)), (a,), backward, "clip_min")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Array) -> Array:
    """Tanh approximation of the Gaussian error linear unit."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    x2 = x * x
    t = x2 * k
    t += 1
    t *= x
    t *= c
    np.tanh(t, out=t)
    y = t + 1
    y *= x
    y *= 0.5

    def backward(g):
        # 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 k x^2)
        dy = x2 * (3 * k)
        dy += 1
        dy *= x
        dy *= c
        dy *= 1 - t * t
        dy += t
        dy += 1
        dy *= 0.5
        dy *= g
        _accumulate(a, dy)

    return _result(y, (a,), backward, "gelu")


# linear algebra and shape

def _swap(x):
    return np.swapaxes(x, -1, -2)


def matmul(a: Array, b: Array) -> Array:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, unbroadcast(g @ _swap(b.data), a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(_swap(a.data) @ g, b.shape)
            _accumulate(b, gb)

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def reshape(a: Array, shape) -> Array:
    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Array, axes) -> Array:
    inv = np.argsort(axes)

    def backward(g):
        _accumulate(a, np.transpose(g, inv))

    return _result(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), backward, "transpose")


def take(a: Array, key) -> Array:
    """Basic (slice/integer) indexing."""
    def backward(g):
        gx = np.zeros(a.shape, dtype=a.dtype)
        gx[key] += g
        _accumulate(a, gx)

    return _result(np.ascontiguousarray(a.data[key]), (a,), backward, "slice")


def slice_axis(a: Array, axis: int, start: int, stop: int) -> Array:
    key = [slice(None)] * a.ndim
    key[axis] = slice(start, stop)
    return take(a, tuple(key))


def concat(arrays, axis: int = 0) -> Array:
    arrays = [_lift(x) for x in arrays]
    sizes = np.cumsum([x.shape[axis] for x in arrays])[:-1]

    def backward(g):
        for x, part in zip(arrays, np.split(g, sizes, axis=axis)):
            _accumulate(x, part)

    return _result(np.concatenate([x.data for x in arrays], axis=axis), arrays, backward, "concat")


def broadcast_to(a: Array, shape) -> Array:
    def backward(g):
        _accumulate(a, unbroadcast(g, a.shape))

    return _result(np.ascontiguousarray(np.broadcast_to(a.data, shape)), (a,), backward, "broadcast")


def reduce_sum(a: Array, axis=None, keepdims: bool = False) -> Array:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def reduce_mean(a: Array, axis=None, keepdims: bool = False) -> Array:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(reduce_sum(a, axis, keepdims), 1.0 / float(n))


def embedding(table: Array, ids) -> Array:
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding index out of range")

    def backward(g):
        gt = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accumulate(table, gt)

    return _result(table.data[ids], (table,), backward, "embedding")


# normalisation and attention

def softmax_masked(a: Array, mask=None) -> Array:
    """Softmax over the last axis of ``a + mask``.

    ``mask`` is additive (0 to keep, ``-inf`` to drop) and must broadcast to
    ``a``. Dropped positions get exactly zero probability and zero gradient.
    """
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=x.dtype)
        try:
            np.broadcast_shapes(mask.shape, x.shape)
        except ValueError as exc:
            raise ValueError(f"mask shape {mask.shape} does not broadcast to {x.shape}") from exc
        if np.broadcast_shapes(mask.shape, x.shape) != x.shape:
            raise ValueError(f"mask shape {mask.shape} does not broadcast to {x.shape}")
        x = x + mask
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _result(y, (a,), backward, "softmax")


def rms_norm(a: Array, gain: Array, eps: float = 1e-8) -> Array:
    """``a / sqrt(mean(a^2) + eps) * gain`` over the last axis."""
    x = a.data
    r = np.sqrt((x * x).mean(axis=-1, keepdims=True) + x.dtype.type(eps))
    n = x / r

    def backward(g):
        if gain.requires_grad:
            _accumulate(gain, (g * n).reshape(-1, x.shape[-1]).sum(axis=0))
        if a.requires_grad:
            gn = g * gain.data
            _accumulate(a, (gn - n * (gn * n).mean(axis=-1, keepdims=True)) / r)

    return _result(n * gain.data, (a, gain), backward, "rms_norm")


# mixture loss

def gmm_nll(X, means: Array, sigmas: Array, log_w) -> Array:
    """Per-batch-element NLL ``-sum_i log sum_j w_j N(x_i | mu_j, sigma_j)``.

    ``X`` (B, N, T) and ``log_w`` (J,) are constants; ``means`` and ``sigmas``
    are (B, J, T). Evaluated in float64 by the compiled kernel when available.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or means.shape != sigmas.shape or means.shape[0] != X.shape[0] \
            or means.shape[2] != X.shape[2]:
        raise ValueError(f"gmm_nll shape mismatch: X {X.shape}, means {means.shape}, sigmas {sigmas.shape}")
    nll, dmu, dsig = kernels.batched_nll_grad(
        X, means.data.astype(np.float64), sigmas.data.astype(np.float64),
        np.asarray(log_w, dtype=np.float64))

    def backward(g):
        g = np.asarray(g, dtype=np.float64)[:, None, None]
        _accumulate(means, g * dmu)
        _accumulate(sigmas, g * dsig)

    return _result(nll.astype(means.dtype), (means, sigmas), backward, "gmm_nll")


# backward pass

def topological_order(root: Array) -> list[Array]:
    """Nodes reachable from ``root`` with every node after its inputs."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def gradients(loss: Array, params=None):
    """Back-propagate from a scalar ``loss``.

    Leaves accumulate into ``.grad`` (reset first). Returns the list of
    gradients for ``params`` when given (zeros for parameters not reached).
    """
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    order = topological_order(loss)
    for node in order:
        node.grad = None
    if params is not None:
        for p in params:
            p.grad = None
    loss.grad = np.ones(loss.shape, dtype=loss.dtype)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
            if node.parents:
                node.grad = None if node is not loss else node.grad
    if params is None:
        return None
    return [p.grad if p.grad is not None else np.zeros(p.shape, dtype=p.dtype) for p in params]


def finite_diff_check(f, params, eps: float = 1e-5) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``f`` takes no arguments and rebuilds the graph from ``params`` (Arrays
    whose ``.data`` is perturbed in place). The error for each parameter is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-12)``.
    """
    params = list(params)
    analytic = gradients(f(), params)
    worst = 0.0
    for p, ga in zip(params, analytic):
        num = np.zeros(p.shape, dtype=np.float64)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            num.reshape(-1)[i] = (hi - lo) / (2 * eps)
        denom = max(float(np.abs(ga).max(initial=0.0)), float(np.abs(num).max(initial=0.0)), 1e-12)
        worst = max(worst, float(np.abs(ga - num).max(initial=0.0)) / denom)
    return worst
