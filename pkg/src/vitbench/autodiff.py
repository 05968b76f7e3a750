"""Dense float64 tensors with a reverse-mode gradient tape.

The op set is exactly what the mini-ViT forward pass, the weighted
cross-entropy loss, and class-activation gradients need: matmul with
stacked batch dims, elementwise arithmetic with numpy-style broadcasting,
last-axis softmax / log-softmax, layer norm, exact (erf) GELU, reductions,
basic indexing, concat and dropout.

Recording is define-by-run: while a ``Tape`` is active on the current
thread, any op whose inputs require grad appends one node. ``backward``
replays the node list in reverse, which is a valid topological order by
construction. Without an active tape, ops are plain numpy evaluation.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericError, ShapeError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A dense float64 array, optionally tracked for gradients.

    ``grad`` reads as a zero array for any grad-requiring tensor that no
    backward pass has touched, so unused leaves report zero gradients.
    """

    __slots__ = ("data", "requires_grad", "_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> np.ndarray | None:
        if self._grad is None and self.requires_grad:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = None if value is None else np.asarray(value, dtype=np.float64)

    def zero_grad(self) -> None:
        self._grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and arrays are wrapped as constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, key):
        return take(self, key)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class _Node:
    """One recorded op: the output it produced and a rule that pushes the
    output's gradient into the inputs' grad buffers."""

    __slots__ = ("output", "rule")

    def __init__(self, output: Tensor, rule: Callable[[np.ndarray], None]):
        self.output = output
        self.rule = rule


_tls = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations for one reverse pass.

    Confined to the thread that opened it; independent tapes on other
    threads do not interact. A tape is single-use: after ``backward``
    consumes it, ``reset()`` must be called before it records again.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape exited out of order")
        stack.pop()

    def record(self, output: Tensor, rule: Callable[[np.ndarray], None]) -> None:
        if self.consumed:
            raise ContractError("tape already consumed by backward(); call reset()")
        self.nodes.append(_Node(output, rule))

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)


def _record(inputs: Sequence[Tensor], out: Tensor, rule: Callable[[np.ndarray], None]) -> Tensor:
    """Mark ``out`` grad-requiring and append to the active tape when any
    input participates in differentiation."""
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = active_tape()
        if tape is not None:
            tape.record(out, rule)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t._grad is None:
        t._grad = np.zeros_like(t.data)
    t._grad += g


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, inverting numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor, tape: Tape) -> None:
    """Reverse-accumulate gradients of a scalar ``loss`` through ``tape``.

    Populates ``.grad`` on every participating tensor; leaves the tape
    consumed (reset it to reuse). Leaves that never fed the loss keep
    zero gradients.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise ContractError("tape already consumed; reset() before reusing")
    if tape.nodes and not any(node.output is loss for node in tape.nodes):
        raise ContractError("loss tensor was not recorded on this tape")
    loss._grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        out = node.output
        if out._grad is None:
            # nothing downstream of this node reached the loss
            continue
        node.rule(out._grad)
    tape.consumed = True


# ---------------------------------------------------------------------------
# ops


def _check_finite(t: Tensor, what: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {what}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with optional stacked leading dims (numpy semantics).

    Gradient rules: dA = dC·Bᵀ and dB = Aᵀ·dC, summed over broadcast
    batch dims.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    _check_finite(a, "matmul left operand")
    _check_finite(b, "matmul right operand")
    out = Tensor(np.matmul(a.data, b.data))
    a_data, b_data = a.data, b.data

    def rule(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b_data, -1, -2)), a_data.shape))
        _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a_data, -1, -2), g), b_data.shape))

    return _record((a, b), out, rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = Tensor(a.data + b.data)
    except ValueError as exc:
        raise ShapeError(f"add shapes incompatible: {a.shape} + {b.shape}") from exc

    def rule(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _record((a, b), out, rule)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)

    def rule(g: np.ndarray) -> None:
        _accumulate(a, -g)

    return _record((a,), out, rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = Tensor(a.data * b.data)
    except ValueError as exc:
        raise ShapeError(f"mul shapes incompatible: {a.shape} * {b.shape}") from exc
    a_data, b_data = a.data, b.data

    def rule(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g * b_data, a_data.shape))
        _accumulate(b, _unbroadcast(g * a_data, b_data.shape))

    return _record((a, b), out, rule)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out = Tensor(a.data * factor)

    def rule(g: np.ndarray) -> None:
        _accumulate(a, g * factor)

    return _record((a,), out, rule)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = Tensor(a.data.reshape(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    in_shape = a.data.shape

    def rule(g: np.ndarray) -> None:
        _accumulate(a, g.reshape(in_shape))

    return _record((a,), out, rule)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(ax) for ax in axes)
    out = Tensor(np.transpose(a.data, axes))
    inverse = tuple(np.argsort(axes))

    def rule(g: np.ndarray) -> None:
        _accumulate(a, np.transpose(g, inverse))

    return _record((a,), out, rule)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = Tensor(np.broadcast_to(a.data, shape).copy())
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from exc

    def rule(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.data.shape))

    return _record((a,), out, rule)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def rule(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(int(lo), int(hi))
            _accumulate(t, g[tuple(index)])

    return _record(tensors, out, rule)


def take(a: Tensor, key) -> Tensor:
    """Basic (slice/int/tuple) indexing; backward scatters into place."""
    out = Tensor(a.data[key])
    in_shape = a.data.shape

    def rule(g: np.ndarray) -> None:
        if not a.requires_grad:
            return
        buf = np.zeros(in_shape)
        buf[key] = g
        _accumulate(a, buf)

    return _record((a,), out, rule)


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    in_shape = a.data.shape

    def rule(g: np.ndarray) -> None:
        if axis is None:
            _accumulate(a, np.broadcast_to(g, in_shape).copy())
        else:
            expanded = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(expanded, in_shape).copy())

    return _record((a,), out, rule)


def tmean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Last-axis softmax with max subtraction for stability."""
    if x.data.ndim == 0 or x.data.shape[-1] == 0:
        raise ShapeError("softmax needs a non-empty last axis")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def rule(g: np.ndarray) -> None:
        inner = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(x, y * (g - inner))

    return _record((x,), out, rule)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    """Numerically stable log(softmax(x)) along the last axis."""
    if x.data.ndim == 0 or x.data.shape[-1] == 0:
        raise ShapeError("log_softmax needs a non-empty last axis")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = Tensor(shifted - lse)
    soft = np.exp(out.data)

    def rule(g: np.ndarray) -> None:
        _accumulate(x, g - soft * g.sum(axis=-1, keepdims=True))

    return _record((x,), out, rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each last-axis slice to zero mean / unit (population)
    variance, then apply the affine gamma, beta."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine params must have shape ({d},), "
            f"got {gamma.shape} and {beta.shape}"
        )
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = Tensor(xhat * gamma.data + beta.data)
    gamma_data = gamma.data

    def rule(g: np.ndarray) -> None:
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, d).sum(axis=0))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma_data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv_std * (gx - m1 - xhat * m2))

    return _record((x, gamma, beta), out, rule)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error GELU: x * Phi(x), with the erf-based Phi."""
    phi_cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * phi_cdf)
    x_data = x.data

    def rule(g: np.ndarray) -> None:
        pdf = np.exp(-0.5 * x_data * x_data) * _INV_SQRT2PI
        _accumulate(x, g * (phi_cdf + x_data * pdf))

    return _record((x,), out, rule)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    out = Tensor(x.data * mask)

    def rule(g: np.ndarray) -> None:
        _accumulate(x, g * mask)

    return _record((x,), out, rule)


# ---------------------------------------------------------------------------
# verification harness


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Worst relative error between tape gradients of ``f`` and central
    finite differences, perturbing every coordinate of ``x``.

    Denominator is max(|analytic|, |numeric|, 1e-12) per coordinate.
    """
    if not 0.0 < h <= 1e-2:
        raise ContractError(f"step h must be in (0, 1e-2], got {h}")
    x.requires_grad = True
    x.zero_grad()
    with Tape() as tape:
        out = f(x)
    backward(out, tape)
    analytic = np.array(x.grad, copy=True)

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f(x).item()
        flat[i] = orig - h
        f_minus = f(x).item()
        flat[i] = orig
        numeric[i] = (f_plus - f_minus) / (2.0 * h)
    numeric = numeric.reshape(x.data.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))
