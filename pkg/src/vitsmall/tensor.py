"""Minimal reverse-mode autodiff over numpy arrays.

Every differentiable op returns a new :class:`Tensor` whose ``_node`` keeps
the parent tensors and a closure mapping the output gradient to parent
gradients. :func:`backward` linearizes the graph into a :class:`Tape`
(topological order), replays it in reverse and then drops the graph.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_check_finite = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """An op received an out-of-range scalar parameter."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Toggle the per-op NaN/Inf check (on by default)."""
    global _check_finite
    prev = _check_finite
    _check_finite = enabled
    try:
        yield
    finally:
        _check_finite = prev


class _Node:
    __slots__ = ("parents", "backward_fn", "op")

    def __init__(self, parents, backward_fn, op):
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op


class Tensor:
    """N-dimensional array with optional gradient participation."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._node: _Node | None = None
        self.name = name

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # operator sugar
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE), dtype=dtype)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if _check_finite and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(tuple(parents), backward_fn, op)
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)), "div")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2 * g * xd,), "square")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form: ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    xd = x.data
    dt = xd.dtype.type
    x2 = xd * xd
    th = np.tanh(dt(_GELU_C) * (xd + dt(0.044715) * x2 * xd))
    out = dt(0.5) * xd * (1 + th)

    def backward_fn(g):
        inner_d = dt(_GELU_C) * (1 + dt(3 * 0.044715) * x2)
        return (g * (dt(0.5) * (1 + th) + dt(0.5) * xd * (1 - th * th) * inner_d),)

    return _make(out, (x,), backward_fn, "gelu")


# ------------------------------------------------------------------ structural

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, tuple(axes))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward_fn(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _make(out, tensors, backward_fn, "concat")


def getitem(x: Tensor, index) -> Tensor:
    """Basic/advanced indexing; gradients scatter back with ``np.add.at``."""
    src_shape, dtype = x.shape, x.dtype
    out = x.data[index]
    basic = _is_basic_index(index)

    def backward_fn(g):
        full = np.zeros(src_shape, dtype=dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (x,), backward_fn, "getitem")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return getitem(x, tuple(index))


def unstack(x: Tensor, axis: int = 0) -> list[Tensor]:
    """Split along ``axis`` into views sharing one backward node per piece."""
    return [getitem(x, tuple([slice(None)] * axis + [i])) for i in range(x.shape[axis])]


# ------------------------------------------------------------------ reductions

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward_fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([src[a] for a in axes]))
    inv = x.dtype.type(1.0 / count)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, src).copy(),)

    return _make(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), backward_fn, "mean")


# ------------------------------------------------------------------ linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def backward_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(out, (a, b), backward_fn, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight is (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    wd = weight.data
    out = x2 @ wd
    if bias is not None:
        out += bias.data
    out = out.reshape(lead + (wd.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, backward_fn, "linear")


# ------------------------------------------------------------------ normalization

def softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Temperature softmax, stabilized by max subtraction."""
    if not temperature > 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    xd = x.data
    z = (xd - xd.max(axis=axis, keepdims=True))
    if temperature != 1.0:
        z = z / xd.dtype.type(temperature)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    inv_t = xd.dtype.type(1.0 / temperature)

    def backward_fn(g):
        gx = out * (g - (g * out).sum(axis=axis, keepdims=True))
        return (gx * inv_t if temperature != 1.0 else gx,)

    return _make(out, (x,), backward_fn, "softmax")


def log_softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise ParameterError(f"log_softmax temperature must be > 0, got {temperature}")
    xd = x.data
    z = xd / xd.dtype.type(temperature)
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    inv_t = xd.dtype.type(1.0 / temperature)

    def backward_fn(g):
        p = np.exp(out)
        return ((g - p * g.sum(axis=axis, keepdims=True)) * inv_t,)

    return _make(out, (x,), backward_fn, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if not eps > 0:
        raise ParameterError("layer_norm eps must be > 0")
    xd = x.data
    d = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    out = xhat
    if gain is not None:
        if gain.shape != (d,):
            raise DimensionError(f"layer_norm: gain {gain.shape} does not match last axis {d}")
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    parents = [x] + [p for p in (gain, bias) if p is not None]

    def backward_fn(g):
        gxhat = g * gain.data if gain is not None else g
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        lead = tuple(range(g.ndim - 1))
        if gain is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _make(out, parents, backward_fn, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm."""
    xd = x.data
    norm = np.maximum(np.sqrt((xd * xd).sum(axis=axis, keepdims=True)), xd.dtype.type(eps))
    out = xd / norm

    def backward_fn(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _make(out, (x,), backward_fn, "l2_normalize")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None = None, training: bool = True) -> Tensor:
    """Inverted dropout; survivors are scaled by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout p must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ------------------------------------------------------------------ losses

def cross_entropy(logits: Tensor, target, tol: float = 1e-5) -> Tensor:
    """Mean over the batch of ``-sum(target * log_softmax(logits))``.

    ``target`` is a (B, k) distribution per row (one-hot or soft).
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=logits.dtype)
    if t.shape != logits.shape or logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs target {t.shape}")
    sums = t.sum(axis=1)
    if np.abs(sums - 1.0).max() > tol:
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ValueError(f"cross_entropy: target row {bad} sums to {sums[bad]!r}, not 1")
    ld = logits.data
    z = ld - ld.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    batch = ld.shape[0]
    loss = np.asarray(-(t * logp).sum() / batch, dtype=ld.dtype)

    def backward_fn(g):
        p = np.exp(logp)
        return (g * (p * t.sum(axis=1, keepdims=True) - t) / ld.dtype.type(batch),)

    return _make(loss, (logits,), backward_fn, "cross_entropy")


# ------------------------------------------------------------------ backward

class Tape:
    """Ops reachable from a root, in execution (topological) order."""

    def __init__(self, root: Tensor):
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                self.nodes.append(t)
                continue
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._node.parents:
                if p._node is not None and id(p) not in seen:
                    stack.append((p, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def clear(self) -> None:
        for t in self.nodes:
            t._node = None
        self.nodes = []


def backward(loss: Tensor, retain_graph: bool = False) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        parent_grads = t._node.backward_fn(g)
        for p, pg in zip(t._node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._node is None:
                pg = np.asarray(pg, dtype=p.dtype).reshape(p.shape)
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            else:
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
    if not retain_graph:
        tape.clear()
    return tape


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
