"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Operations execute eagerly on numpy buffers. While a :class:`GradientTape` is
active (as a context manager) every op whose inputs require gradients pushes a
closure onto the tape; ``backward`` replays the tape in exact reverse execution
order, accumulating ndarray gradients keyed by tensor identity. Tensors are
treated as immutable values once created, which is what makes replay sound.

Everything is float64: the op set is small, speed is not a concern at this
scale, and central finite-difference checks need the precision. Softmax and
log-softmax subtract the row maximum before exponentiating; finite-difference
oracles should assume exactly that formula.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import erf

from .errors import NumericError, ShapeError, TapeError

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

_state = threading.local()

_finite_checks = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle NaN/Inf validation of op outputs. Returns the previous setting."""
    global _finite_checks
    previous = _finite_checks
    _finite_checks = bool(enabled)
    return previous


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


class Tensor:
    """Immutable dense float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _to_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _to_tensor(other))

    def __rsub__(self, other):
        return sub(_to_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _to_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _to_tensor(other))

    def __rtruediv__(self, other):
        return div(_to_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _to_tensor(other))


class Parameter(Tensor):
    """A named leaf tensor updated by the optimizer; always requires grad."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def _to_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradientTape:
    """Ordered record of executed ops plus a registry of named parameters.

    Single-owner: one thread, one use. ``backward`` may be called exactly once;
    it clears the op record and returns a gradient for every registered
    parameter (exact zeros for parameters off the loss path).
    """

    def __init__(self):
        self._ops: list = []
        self._params: dict[str, Tensor] = {}
        self._consumed = False

    def register(self, name: str, tensor: Tensor) -> Tensor:
        if not tensor.requires_grad:
            raise TapeError(f"parameter {name!r} does not require gradients")
        self._params[name] = tensor
        return tensor

    def register_all(self, params) -> None:
        for name, tensor in dict(params).items():
            self.register(name, tensor)

    def __enter__(self) -> "GradientTape":
        if self._consumed:
            raise TapeError("GradientTape cannot be reused after backward")
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("GradientTape exited out of order")
        stack.pop()
        return False

    def _record(self, out: Tensor, inputs: tuple, backward) -> None:
        self._ops.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> dict[str, Tensor]:
        """Accumulate d(loss)/d(param) for every registered parameter."""
        if self._consumed:
            raise TapeError("backward already called on this tape")
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            shape = getattr(loss, "shape", None)
            raise TapeError(f"loss must be a scalar tensor, got shape {shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward_fn in reversed(self._ops):
            gout = grads.pop(id(out), None)
            if gout is None:
                continue
            for tensor, contribution in zip(inputs, backward_fn(gout)):
                if contribution is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                held = grads.get(key)
                grads[key] = contribution if held is None else held + contribution
        result = {}
        for name, param in self._params.items():
            grad = grads.get(id(param))
            if grad is None:
                grad = np.zeros_like(param.data)
            elif not np.isfinite(grad).all():
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            result[name] = Tensor(np.broadcast_to(grad, param.data.shape).copy())
        self._ops.clear()
        self._consumed = True
        return result


def _emit(data: np.ndarray, inputs: tuple, backward) -> Tensor:
    """Wrap an op result, validate finiteness, and record it on the tape."""
    if _finite_checks and not np.isfinite(data).all():
        raise NumericError("operation produced a non-finite value")
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    if out.requires_grad:
        stack = _tape_stack()
        if stack:
            stack[-1]._record(out, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over axes introduced or stretched by broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _emit(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _emit(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        return (-g,)

    return _emit(-a.data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(a.data)

    def backward(g):
        return (g * data,)

    return _emit(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NumericError("log applied to non-positive values")
    data = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _emit(data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    if (a.data < 0).any():
        raise NumericError("sqrt applied to negative values")
    data = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore"):
            return (g * 0.5 / data,)

    return _emit(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    def backward(g):
        return (g * (a.data > 0),)

    return _emit(np.maximum(a.data, 0.0), (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    cdf = 0.5 * (1.0 + erf(a.data / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (cdf + a.data * pdf),)

    return _emit(a.data * cdf, (a,), backward)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _emit(data, (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _emit(a.data.transpose(axes), (a,), backward)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        return (_unbroadcast(g, a.shape),)

    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: {a.shape} does not broadcast to {shape}") from None
    return _emit(data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_to_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    return _emit(data, tuple(tensors), backward)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / count))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy-style stacking over leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} @ {b.shape} do not align") from None
    return _emit(data, (a, b), backward)


# ---------------------------------------------------------------------------
# normalization and attention nonlinearities
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Row-stable softmax: subtract the axis max, exponentiate, normalize."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _emit(data, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def backward(g):
        return (g - np.exp(data) * g.sum(axis=axis, keepdims=True),)

    return _emit(data, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    dim = a.shape[-1]
    if gain.shape != (dim,) or bias.shape != (dim,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} vs feature dim {dim}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        g_xhat = g * gain.data
        g_a = inv * (
            g_xhat
            - g_xhat.mean(axis=-1, keepdims=True)
            - xhat * (g_xhat * xhat).mean(axis=-1, keepdims=True)
        )
        return g_a, g_gain, g_bias

    return _emit(xhat * gain.data + bias.data, (a, gain, bias), backward)


# ---------------------------------------------------------------------------
# gather / scatter
# ---------------------------------------------------------------------------


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Look up rows of ``weight`` by integer index; grads scatter-add back."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding ids out of range for table {weight.shape}")

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        return (gw,)

    return _emit(weight.data[ids], (weight,), backward)


def select_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """out[b] = a[b, index[b]] for a (B, L, ...) tensor; per-sample gather."""
    index = np.asarray(index)
    batch = np.arange(a.shape[0])

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (batch, index), g)
        return (ga,)

    return _emit(a.data[batch, index], (a,), backward)


def select_entries(a: Tensor, index: np.ndarray) -> Tensor:
    """out[b] = a[b, index[b]] for a (B, N) matrix."""
    if a.ndim != 2:
        raise ShapeError(f"select_entries expects a matrix, got {a.shape}")
    return select_rows(a, index)
