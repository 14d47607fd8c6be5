"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records its inputs and a backward rule that
maps the output gradient to one gradient per input. ``backward`` orders the
recorded graph topologically and visits each operation exactly once.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ContractError, ShapeError

_PRECISIONS = {"f64": np.float64, "f32": np.float32}
_dtype = np.float64
_grad_state = threading.local()

# Finite stand-in for -inf in masked attention scores.
MASK_VALUE = -1e30


def set_precision(name: str) -> None:
    """Select the floating dtype for tensors created from now on."""
    global _dtype
    if name not in _PRECISIONS:
        raise ConfigError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[name]


def get_precision() -> str:
    return "f64" if _dtype is np.float64 else "f32"


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, frozen encoders)."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """N-dimensional float array that can take part in a differentiation graph."""

    __array_priority__ = 100  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=_dtype)
        if 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def _wrap(data: np.ndarray, requires_grad: bool = False) -> Tensor:
    # Fast constructor for op outputs: data is already an array of the right dtype.
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = requires_grad
    out.grad = None
    out._parents = ()
    out._backward = None
    out._op = ""
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = _wrap(np.asarray(data, dtype=_dtype), track)
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- backward pass -----------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every leaf that requires it."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    order = _topological_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), _bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), _bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), _bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(a.data / b.data, (a, b), _bw, "div")


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def _bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), _bw, "matmul")


# -- reductions and shape manipulation --------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), _bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(x.shape[a] for a in axes)
    return sum_(x, axis, keepdims) * (1.0 / count)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def _bw(g):
        return (g.reshape(x.shape),)

    return _result(x.data.reshape(shape), (x,), _bw, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(a % x.ndim for a in axes)
    inverse = tuple(np.argsort(axes))

    def _bw(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(x.data, axes), (x,), _bw, "transpose")


def getitem(x: Tensor, index) -> Tensor:
    def _bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), _bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(
                f"concat along axis {axis}: incompatible shapes {[t.shape for t in tensors]}"
            )
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, _bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {sorted(shapes)}")

    def _bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, _bw, "stack")


def pad(x: Tensor, axis: int, before: int = 0, after: int = 0) -> Tensor:
    """Zero-pad one axis."""
    if before < 0 or after < 0:
        raise ShapeError("padding amounts must be non-negative")
    if before == 0 and after == 0:
        return x
    ax = axis % x.ndim
    widths = [(0, 0)] * x.ndim
    widths[ax] = (before, after)
    n = x.shape[ax]

    def _bw(g):
        return (np.take(g, np.arange(before, before + n), axis=ax),)

    return _result(np.pad(x.data, widths), (x,), _bw, "pad")


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"row ids out of range for table of shape {table.shape}")

    def _bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _result(table.data[ids], (table,), _bw, "take_rows")


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)

    def _bw(g):
        return (_unbroadcast(np.where(mask, 0.0, g), x.shape),)

    return _result(np.where(mask, value, x.data), (x,), _bw, "masked_fill")


# -- nonlinearities and normalisation ---------------------------------------

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf-based normal CDF."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def _bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _result(x.data * cdf, (x,), _bw, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), _bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: last dim {d} does not match gain {gain.shape} / bias {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def _bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gain.data + bias.data, (x, gain, bias), _bw, "layer_norm")


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean next-token cross-entropy over positions where ``mask`` is true."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not align with targets {targets.shape}")
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != targets.shape:
        raise ShapeError(f"loss mask {mask.shape} does not align with targets {targets.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ContractError("cross_entropy: every position is masked out")
    safe_targets = np.where(mask, targets, 0)
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_z
    picked = np.take_along_axis(log_probs, safe_targets[..., None], axis=-1)[..., 0]
    value = -(picked * mask).sum() / count

    def _bw(g):
        grad = np.exp(log_probs)
        np.put_along_axis(
            grad,
            safe_targets[..., None],
            np.take_along_axis(grad, safe_targets[..., None], axis=-1) - 1.0,
            axis=-1,
        )
        return (grad * (mask[..., None] * (g / count)),)

    return _result(np.asarray(value), (logits,), _bw, "cross_entropy")


# -- attention ---------------------------------------------------------------

def causal_mask(lq: int, lk: int) -> np.ndarray:
    """True above the diagonal: query i may not attend to key j > i + (lk - lq)."""
    return np.triu(np.ones((lq, lk), dtype=bool), k=1 + lk - lq)


def attention_heads(q: Tensor, k: Tensor, v: Tensor, heads: int, causal: bool = False) -> Tensor:
    """Scaled dot-product attention on already projected ``[..., L, d]`` inputs.

    The model width is split into ``heads`` slices of size ``d // heads``;
    scores are scaled by ``1/sqrt(d // heads)``. Leading axes broadcast, so an
    unbatched query can attend over batched keys.
    """
    d = q.shape[-1]
    if d % heads:
        raise ConfigError(f"width {d} is not divisible by {heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ShapeError(f"attention width mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"keys {k.shape} and values {v.shape} differ in length")
    dh = d // heads
    lq, lk = q.shape[-2], k.shape[-2]

    def split(t: Tensor) -> Tensor:
        return t.reshape(*t.shape[:-1], heads, dh).swapaxes(-2, -3)

    scores = (split(q) @ split(k).swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    if causal:
        scores = masked_fill(scores, causal_mask(lq, lk), MASK_VALUE)
    context = softmax(scores, axis=-1) @ split(v)
    context = context.swapaxes(-2, -3)
    return context.reshape(*context.shape[:-2], d)


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_o: Tensor,
    b_o: Tensor | None = None,
    causal: bool = False,
) -> Tensor:
    """Project q/k/v, attend per head, concatenate heads, project the output.

    Output length equals the query length whatever the key length.
    """
    out = attention_heads(q @ w_q, k @ w_k, v @ w_v, heads, causal=causal) @ w_o
    return out if b_o is None else out + b_o


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads))
