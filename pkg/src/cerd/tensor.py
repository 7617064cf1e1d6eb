"""Dense float64 tensors with reverse-mode automatic differentiation.

Each differentiable operation records its inputs and a closure that maps the
output gradient to input gradients.  Nodes carry a global sequence number, so
the recorded graph is an execution-ordered tape; :meth:`Tensor.backward`
replays it in exact reverse order.

Gradients accumulate across backward calls.  Nothing here zeroes them; the
optimizer does that after each step.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError, EvaluationError, ParameterError

_seq = itertools.count()
_grad_enabled = True


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


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_seq)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, "mean", axis, keepdims)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def parameter(values) -> Tensor:
    """A trainable leaf owning a private copy of ``values``."""
    return Tensor(np.array(values, dtype=np.float64, copy=True), requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(*shapes) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {' and '.join(map(str, shapes))}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _result(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def sigmoid(a) -> Tensor:
    """Elementwise logistic function; saturates without overflow."""
    a = as_tensor(a)
    out = expit(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def quick_gelu(a) -> Tensor:
    """Smooth ramp x * sigmoid(1.702 x)."""
    a = as_tensor(a)
    x = a.data
    s = expit(1.702 * x)
    return _result(x * s, (a,), lambda g: (g * (s + 1.702 * x * s * (1.0 - s)),), "quick_gelu")


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` is true, else from ``b``.

    Unselected values are never combined arithmetically with selected ones,
    so non-finite entries in the unselected branch cannot leak through.
    """
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape(cond.shape, a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def bw(g):
        zero = np.zeros_like(g)
        return (
            _unbroadcast(np.where(cond, g, zero), sa),
            _unbroadcast(np.where(cond, zero, g), sb),
        )

    out = np.where(cond, a.data, b.data)
    if out.shape != shape:
        out = np.broadcast_to(out, shape).copy()
    return _result(out, (a, b), bw, "where")


def dropout(a, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: scale kept units by 1/(1-p) at train time, identity at eval."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    a = as_tensor(a)
    if not training or p == 0.0:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), bw, "matmul")


def affine(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` along the last axis of ``x``.

    ``weight`` is (out, in); ``x`` is (..., in).  Fused into one tape node.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1:] != weight.shape[1:]:
        raise DimensionError(f"affine input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out, parents, bw, "affine")


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def reduce(x, op: str = "sum", axis=None, keepdims: bool = False) -> Tensor:
    """Sum or mean over ``axis`` (all axes when None)."""
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    if op == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)
        count = 1
    elif op == "mean":
        out = x.data.mean(axis=axes, keepdims=keepdims)
        count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    else:
        raise ParameterError(f"unknown reduction {op!r}")
    shape = x.shape

    def bw(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count if count != 1 else g, shape),)

    return _result(np.asarray(out), (x,), bw, op)


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    return reduce(x, "sum", axis, keepdims)


def mean(x, axis=None, keepdims=False) -> Tensor:
    return reduce(x, "mean", axis, keepdims)


# ---------------------------------------------------------------- shape


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {src} into {tuple(shape)}") from None
    return _result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    return _result(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def getitem(x, index) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate gradient."""
    x = as_tensor(x)
    try:
        out = x.data[index]
    except IndexError as exc:
        raise DimensionError(f"index out of range for shape {x.shape}: {exc}") from None
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out), (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"cannot stack shapes {[t.shape for t in tensors]}") from None
    n = len(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _result(out, tensors, bw, "stack")


def take_along(x, indices: np.ndarray, axis: int = -1) -> Tensor:
    """``np.take_along_axis``; indices must be unique along ``axis``."""
    x = as_tensor(x)
    indices = np.asarray(indices)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.put_along_axis(full, indices, g, axis=axis)
        return (full,)

    return _result(np.take_along_axis(x.data, indices, axis=axis), (x,), bw, "take_along")


def scatter_rows(x, rows: np.ndarray, n: int) -> Tensor:
    """Sum rows of ``x`` into a zero tensor with ``n`` leading rows at ``rows``."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.intp)
    out = np.zeros((n,) + x.shape[1:])
    np.add.at(out, rows, x.data)
    return _result(out, (x,), lambda g: (g[rows],), "scatter_rows")


# ---------------------------------------------------------------- normalisers


def softmax(x, temperature: float = 1.0, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax of ``x / temperature``.

    ``mask`` (broadcastable, True = keep) forces excluded positions to exactly
    zero probability.
    """
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    x = as_tensor(x)
    z = x.data / temperature
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(np.any(np.broadcast_to(mask, z.shape), axis=axis)):
            raise ContractError("softmax mask excludes every position of some row")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return ((s * (g - (g * s).sum(axis=axis, keepdims=True))) / temperature,)

    return _result(s, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _result(out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        return (inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)

    normed = _result(xhat, (x,), bw, "normalize")
    return normed * gamma + beta


# ---------------------------------------------------------------- backward


def tape(loss: Tensor) -> list[Tensor]:
    """Operation nodes reachable from ``loss``, in execution order."""
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack_ = [loss]
    while stack_:
        node = stack_.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack_.extend(node._parents)
    nodes.sort(key=lambda t: t._seq)
    return nodes


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``."""
    if grad is None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones(loss.shape)
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=np.float64)}
    for node in reversed(tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)
    rel_error: np.ndarray = field(repr=False)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)


def _rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def _checked_value(f: Callable[[], Tensor]) -> float:
    out = f()
    if out.size != 1:
        raise ContractError(f"gradient check needs a scalar function, got shape {out.shape}")
    val = float(out.data)
    if not np.isfinite(val):
        raise EvaluationError(f"function value is not finite: {val}")
    return val


def numeric_gradient(f: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5) -> list[np.ndarray]:
    """Central differences of ``f`` with respect to each tensor in ``params``."""
    out = []
    with no_grad():
        for p in params:
            g = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = _checked_value(f)
                flat[i] = orig - step
                fm = _checked_value(f)
                flat[i] = orig
                gflat[i] = (fp - fm) / (2.0 * step)
            out.append(g)
    return out


def check_parameter_gradients(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> list[GradCheckReport]:
    """Compare backprop gradients of ``f()`` against central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ParameterError(f"finite-difference step must lie in [1e-7, 1e-3], got {step}")
    for p in params:
        p.grad = None
    loss = f()
    _checked_value(lambda: loss)
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    numeric = numeric_gradient(f, params, step)
    reports = []
    for a, n in zip(analytic, numeric):
        rel = _rel_error(a, n, floor)
        reports.append(GradCheckReport(float(rel.max()) if rel.size else 0.0, tol, a, n, rel))
    return reports


def check_gradients(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Gradient check of a scalar function of one tensor."""
    x = x if x.requires_grad else Tensor(x.data, requires_grad=True)
    return check_parameter_gradients(lambda: f(x), [x], step, tol, floor)[0]
