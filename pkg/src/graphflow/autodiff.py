"""Dense float64 tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array. While a Tape is active, every operation
whose output requires gradients appends a node (output, parents,
backward closure) to the tape; Tape.backward walks the nodes in reverse
creation order, which is a valid topological order because every op
creates a fresh output tensor. Leaf gradients accumulate into
Tensor.grad, so several tapes run in sequence implement gradient
accumulation over a batch.

With no active tape the same functions run as plain numpy plus a thin
wrapper, which is the inference fast path.

Elementwise ops follow numpy broadcasting; the backward pass sums
gradients over broadcast axes, so a weight shared across a stacked
batch dimension accumulates contributions from every slice.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr as _scipy_log_ndtr

LOG_TWO_PI = float(np.log(2.0 * np.pi))

_ACTIVE_TAPE = None


class Tensor:
    """A float64 array plus a gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, _NEG_ONE)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Operation record for one backward pass.

    Single-writer: at most one tape is active at a time, and one tape
    should cover one training example. Gradients from successive tapes
    accumulate into the leaves' .grad slots in call order.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into .grad for every leaf tensor."""
        if loss.data.ndim != 0:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        pending = {id(loss): np.ones((), dtype=np.float64)}
        holders = {id(loss): loss}
        for out, parents, back in reversed(self.nodes):
            g = pending.pop(id(out), None)
            holders.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, back(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
                    holders[key] = parent
        # whatever was never popped is a leaf of this tape
        for key, g in pending.items():
            leaf = holders[key]
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def _record(out: Tensor, parents, back) -> None:
    if _ACTIVE_TAPE is not None and out.requires_grad:
        _ACTIVE_TAPE.nodes.append((out, parents, back))


def _needs_grad(*tensors) -> bool:
    return any(t.requires_grad for t in tensors)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting added or stretched."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad.reshape(shape)


def _broadcast_op(a: Tensor, b: Tensor, fn, name: str):
    try:
        data = fn(a.data, b.data)
    except ValueError:
        raise ValueError(
            f"{name}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None
    return data


_NEG_ONE = None  # placeholder, assigned after Tensor exists


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(_broadcast_op(a, b, np.add, "add"), _needs_grad(a, b))

    def back(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    _record(out, (a, b), back)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(_broadcast_op(a, b, np.subtract, "sub"), _needs_grad(a, b))

    def back(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    _record(out, (a, b), back)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(_broadcast_op(a, b, np.multiply, "mul"), _needs_grad(a, b))

    def back(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    _record(out, (a, b), back)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    if np.any(b.data == 0.0):
        raise ValueError("div: denominator contains zero")
    out = Tensor(_broadcast_op(a, b, np.divide, "div"), _needs_grad(a, b))
    inv = 1.0 / b.data

    def back(g):
        return (
            _unbroadcast(g * inv, a.data.shape),
            _unbroadcast(-g * out.data * inv, b.data.shape),
        )

    _record(out, (a, b), back)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(
            f"matmul needs rank >= 2 operands, got {a.data.shape} @ {b.data.shape}"
        )
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ValueError(
            f"matmul: shapes {a.data.shape} and {b.data.shape} are incompatible"
        ) from None
    out = Tensor(data, _needs_grad(a, b))

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    _record(out, (a, b), back)
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data), a.requires_grad)

    def back(g):
        return (g * out.data,)

    _record(out, (a,), back)
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise ValueError("log: input must be strictly positive")
    out = Tensor(np.log(a.data), a.requires_grad)

    def back(g):
        return (g / a.data,)

    _record(out, (a,), back)
    return out


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise ValueError("sqrt: input must be non-negative")
    out = Tensor(np.sqrt(a.data), a.requires_grad)

    def back(g):
        return (g * (0.5 / out.data),)

    _record(out, (a,), back)
    return out


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data), a.requires_grad)

    def back(g):
        return (g * (1.0 - out.data * out.data),)

    _record(out, (a,), back)
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), a.requires_grad)

    def back(g):
        return (g * (a.data > 0.0),)

    _record(out, (a,), back)
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient is zero where clamping engaged."""
    out = Tensor(np.clip(a.data, lo, hi), a.requires_grad)
    inside = (a.data > lo) & (a.data < hi)

    def back(g):
        return (g * inside,)

    _record(out, (a,), back)
    return out


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties route the gradient to the first argument."""
    out = Tensor(_broadcast_op(a, b, np.minimum, "minimum"), _needs_grad(a, b))
    take_a = a.data <= b.data

    def back(g):
        return (
            _unbroadcast(g * take_a, a.data.shape),
            _unbroadcast(g * ~take_a, b.data.shape),
        )

    _record(out, (a, b), back)
    return out


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), a.requires_grad)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape),)

    _record(out, (a,), back)
    return out


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), a.requires_grad)

    def back(g):
        return (g.reshape(a.data.shape),)

    _record(out, (a,), back)
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        any(t.requires_grad for t in tensors),
    )
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, offsets, axis=axis))

    _record(out, tuple(tensors), back)
    return out


def take(a: Tensor, indices) -> Tensor:
    """Advanced integer indexing a[indices]; indices is a tuple of int arrays."""
    out = Tensor(a.data[indices], a.requires_grad)

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, indices, g)
        return (ga,)

    _record(out, (a,), back)
    return out


def logsumexp(a: Tensor, axis: int) -> Tensor:
    """log(sum(exp(a))) along one axis, computed with the max-shift trick."""
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out_data = np.squeeze(m + np.log(total), axis=axis)
    out = Tensor(out_data, a.requires_grad)
    softmax = shifted / total

    def back(g):
        return (np.expand_dims(g, axis) * softmax,)

    _record(out, (a,), back)
    return out


def log_ndtr(a: Tensor) -> Tensor:
    """Log of the standard normal CDF; gradient is the hazard exp(logpdf - logcdf)."""
    out = Tensor(_scipy_log_ndtr(a.data), a.requires_grad)

    def back(g):
        log_pdf = -0.5 * a.data * a.data - 0.5 * LOG_TWO_PI
        return (g * np.exp(log_pdf - out.data),)

    _record(out, (a,), back)
    return out


def gaussian_logpdf(x, mu, alpha) -> Tensor:
    """Elementwise log N(x; mu, alpha^2) with scale parameter alpha > 0."""
    x, mu, alpha = _wrap(x), _wrap(mu), _wrap(alpha)
    if np.any(alpha.data <= 0.0):
        raise ValueError("gaussian_logpdf: alpha must be strictly positive")
    z = (x - mu) / alpha
    return (-0.5 * LOG_TWO_PI) + (-1.0 * log(alpha)) + (-0.5) * z * z


@dataclass
class BatchNormState:
    """Running statistics buffer for one batch-norm site."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @staticmethod
    def fresh(width: int) -> "BatchNormState":
        return BatchNormState(
            running_mean=np.zeros(width, dtype=np.float64),
            running_var=np.ones(width, dtype=np.float64),
        )

    def update(self, mean: np.ndarray, var: np.ndarray, momentum: float) -> None:
        self.running_mean = momentum * self.running_mean + (1.0 - momentum) * mean
        self.running_var = momentum * self.running_var + (1.0 - momentum) * var


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    mask: np.ndarray | None = None,
    counts: np.ndarray | None = None,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize features over all row positions.

    For a (n, k) input the statistics run over the n rows. For a stacked
    (S, n, k) input a (S, n, 1) mask with per-slice row counts (S, 1, 1)
    restricts the statistics to unmasked rows; one shared mean/var pair
    covers every unmasked row of the whole stack, so normalization stays
    an affine map and the column sums over a slice keep carrying graph
    structure. Masked output rows are garbage and the caller is expected
    to mask them out again. Training mode uses batch statistics and folds
    them into the running buffers once per call; evaluation mode reads
    the running buffers.
    """
    if training:
        if mask is None:
            n = x.data.shape[-2]
            mean = tensor_sum(x, axis=-2, keepdims=True) * (1.0 / n)
            centered = x - mean
            var = tensor_sum(centered * centered, axis=-2, keepdims=True) * (1.0 / n)
            state.update(
                np.squeeze(mean.data, -2), np.squeeze(var.data, -2), momentum
            )
        else:
            inv_total = 1.0 / counts.sum()
            mean = tensor_sum(x * mask, axis=(0, 1), keepdims=True) * inv_total
            centered = x - mean
            var = tensor_sum(centered * centered * mask, axis=(0, 1), keepdims=True) * inv_total
            state.update(
                mean.data.reshape(-1), var.data.reshape(-1), momentum
            )
        scale = gamma / sqrt(var + eps)
        return centered * scale + beta
    normalized = (x - state.running_mean) / np.sqrt(state.running_var + eps)
    return normalized * gamma + beta


@dataclass
class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One Adam update, in place on params, with bias correction.

    Raises on a non-finite gradient, naming the offending parameter.
    """
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


def zero_grads(params) -> None:
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.grad = None


def grad_check(f, params: dict, h: float = 1e-5) -> float:
    """Compare tape gradients of f() against central finite differences.

    f is a zero-argument callable returning a scalar Tensor; it must be
    a deterministic function of the parameter values. Returns the worst
    relative error |a - n| / max(1e-8, |a| + |n|) over all parameter
    entries.
    """
    zero_grads(params)
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    analytic = {}
    for name, p in params.items():
        analytic[name] = (
            np.zeros_like(p.data) if p.grad is None else np.array(p.grad, copy=True)
        )
    zero_grads(params)

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            f_plus = f().item()
            flat[i] = saved - h
            f_minus = f().item()
            flat[i] = saved
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(ana[i] - numeric) / max(1e-8, abs(ana[i]) + abs(numeric))
            if err > worst:
                worst = err
    return worst


_NEG_ONE = Tensor(-1.0)
