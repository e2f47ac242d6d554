"""Reverse-mode automatic differentiation over numpy arrays.

A `Tensor` wraps a row-major numpy array. Operations executed while a `Tape`
is active, and that touch at least one tensor with `requires_grad`, append a
node (output, inputs, backward rule) to the tape. `backward(loss)` walks the
tape in reverse, accumulates gradients additively into leaf `grad` buffers
and frees the tape.

Outside a tape every operation is a plain numpy computation, which is what
inference and sampling use.

API:
- Tensor(data, requires_grad=False, name=None)
- Tape() context manager, backward(loss)
- add, sub, mul, scale, neg, matmul, sum, mean, reshape, transpose,
  slice_last, embedding, gelu, silu, softmax, cross_entropy,
  layer_norm_adaptive, rotary_apply
"""
from __future__ import annotations
import contextvars
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, DomainError

LOG_CLAMP = 1e-30
VARIANCE_FLOOR = 1e-5
ROTARY_BASE = 10000.0
_GELU_C = float(np.sqrt(2.0 / np.pi))

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "loopmdm_active_tape", default=None
)

Rule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
ArrayLike = Union["Tensor", np.ndarray, float, int]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; the tape is active only inside the block and
    only for the current thread/context.
    """

    def __init__(self):
        self.nodes: List[Tuple[Tensor, Tuple[Tensor, ...], Rule]] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: Tuple[Tensor, ...], rule: Rule) -> Tensor:
    tape = _active_tape.get()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=tracked)
    if tracked:
        out._tape = tape
        tape.nodes.append((out, inputs, rule))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf, then free the tape."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ContractError("loss was not produced by a recorded tape")
    grads = {id(loss): np.ones_like(loss.data)}
    for out, inputs, rule in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, rule(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=inp.data.dtype)
            if inp.is_leaf:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
    tape.clear()


# -- elementwise -----------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    v = x.data
    u = np.tanh(_GELU_C * (v + 0.044715 * v ** 3))
    out = 0.5 * v * (1.0 + u)

    def rule(g):
        du = (1.0 - u ** 2) * _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        return (g * (0.5 * (1.0 + u) + 0.5 * v * du),)

    return _result(out, (x,), rule)


def silu(x: Tensor) -> Tensor:
    v = x.data
    sig = 1.0 / (1.0 + np.exp(-v))
    return _result(v * sig, (x,), lambda g: (g * (sig + v * sig * (1.0 - sig)),))


# -- shape -----------------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul inner dimensions disagree", a.shape, b.shape)
    out = np.matmul(a.data, b.data)

    def rule(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), rule)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), rule)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return _result(
        np.ascontiguousarray(x.data.transpose(axes)), (x,),
        lambda g: (g.transpose(inverse),),
    )


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    def rule(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return _result(x.data[..., start:stop].copy(), (x,), rule)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DomainError(f"embedding ids must lie in [0, {table.shape[0]})")

    def rule(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _result(table.data[ids], (table,), rule)


# -- neural ops ------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid", x.shape)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    y = ex / ex.sum(axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), rule)


def cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    position_mask: np.ndarray,
    weights,
) -> Tensor:
    """Weighted masked negative log-likelihood, summed over positions.

    `logits` is [..., L, V]; `targets`, `position_mask` and `weights` are
    broadcastable to [..., L]. Returns sum(mask * w * -log p[target]) with
    the log clamped at log(1e-30).
    """
    x = logits.data
    vocab = x.shape[-1]
    targets = np.asarray(targets)
    mask = np.broadcast_to(np.asarray(position_mask, dtype=bool), x.shape[:-1])
    if targets.shape != x.shape[:-1]:
        raise DimensionError("cross_entropy targets do not match logits", targets.shape, x.shape)
    chosen = targets[mask]
    if chosen.size and (chosen.min() < 0 or chosen.max() >= vocab):
        raise DomainError(f"cross_entropy target outside vocabulary [0, {vocab})")

    m = x.max(axis=-1, keepdims=True)
    ex = np.exp(x - m)
    z = ex.sum(axis=-1, keepdims=True)
    log_probs = x - m - np.log(z)
    safe = np.where(mask, targets, 0)
    picked = np.take_along_axis(log_probs, safe[..., None], axis=-1)[..., 0]
    floor = np.log(LOG_CLAMP)
    clamped = picked < floor
    nll = -np.maximum(picked, floor)
    coef = np.where(mask, np.broadcast_to(np.asarray(weights, dtype=np.float64), mask.shape), 0.0)
    loss = np.asarray((coef * nll).sum())

    def rule(g):
        grad = ex / z
        np.put_along_axis(grad, safe[..., None], np.take_along_axis(grad, safe[..., None], -1) - 1.0, -1)
        return (grad * (coef * ~clamped)[..., None] * g,)

    return _result(loss, (logits,), rule)


def layer_norm_adaptive(x: Tensor, scale_: Tensor, shift: Tensor) -> Tensor:
    """(1 + scale) * normalize(x) + shift over the last axis."""
    if scale_.shape[-1] != x.shape[-1] or shift.shape[-1] != x.shape[-1]:
        raise DimensionError("layer_norm_adaptive width mismatch", x.shape, scale_.shape, shift.shape)
    v = x.data
    centered = v - v.mean(axis=-1, keepdims=True)
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    active = var >= VARIANCE_FLOOR
    rstd = 1.0 / np.sqrt(np.maximum(var, VARIANCE_FLOOR))
    xhat = centered * rstd
    gain = 1.0 + scale_.data
    out = gain * xhat + shift.data

    def rule(g):
        gx_hat = g * gain
        mean_g = gx_hat.mean(axis=-1, keepdims=True)
        # floored rows have a constant rstd, so the variance term vanishes
        mean_gx = (gx_hat * xhat).mean(axis=-1, keepdims=True) * active
        gx = rstd * (gx_hat - mean_g - xhat * mean_gx)
        return gx, _unbroadcast(g * xhat, scale_.shape), _unbroadcast(g, shift.shape)

    return _result(out, (x, scale_, shift), rule)


def rotary_tables(positions: np.ndarray, d_head: int, dtype=np.float64) -> Tuple[np.ndarray, np.ndarray]:
    if d_head % 2:
        raise ConfigError("model.d_head", f"rotary encoding needs an even head width, got {d_head}")
    inv_freq = ROTARY_BASE ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rotary_apply(x: Tensor, positions: np.ndarray) -> Tensor:
    """Rotate interleaved pairs (2i, 2i+1) of [..., L, heads, d_head] by position angles."""
    positions = np.asarray(positions)
    if x.ndim < 3 or x.shape[-3] != positions.shape[0]:
        raise DimensionError("rotary_apply expects [..., L, heads, d_head] with L positions", x.shape, positions.shape)
    cos, sin = rotary_tables(positions, x.shape[-1], x.data.dtype)
    cos, sin = cos[:, None, :], sin[:, None, :]
    even, odd = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos

    def rule(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        grad = np.empty_like(g)
        grad[..., 0::2] = ge * cos + go * sin
        grad[..., 1::2] = -ge * sin + go * cos
        return (grad,)

    return _result(out, (x,), rule)
