"""Parameter containers and the layers shared by encoders, adapters and the decoder."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor. Freezing flips ``requires_grad`` off."""

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, trainable={self.requires_grad})"


def init_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    # Round through float32 so checkpoints (f32 payloads) reload bit-exactly.
    return (rng.standard_normal(shape) * std).astype(np.float32).astype(np.float64)


class Module:
    """Walks its attributes to find parameters and child modules."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        yield f"{prefix}{name}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = True
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise ShapeError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, value in state.items():
            if name not in params:
                continue
            p = params[name]
            if p.shape != tuple(value.shape):
                raise ShapeError(f"{name}: expected shape {p.shape}, got {tuple(value.shape)}")
            p.data = np.array(value, dtype=p.data.dtype)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    """``y = x @ weight + bias`` with ``weight`` stored as ``[in, out]``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        if d_in < 1 or d_out < 1:
            raise ConfigError(f"Linear dims must be positive, got {d_in}->{d_out}")
        self.d_in, self.d_out = d_in, d_out
        self.weight = Parameter(init_normal(rng, (d_in, d_out), d_in ** -0.5))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"Linear expects last dim {self.d_in}, got input {x.shape}")
        y = x @ self.weight
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.eps = eps
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention(Module):
    """Query/key/value projections, per-head attention, output projection.

    q/k/v projections carry no bias: a key bias has an identically zero
    gradient under softmax, and the others add nothing the output bias lacks.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if heads < 1 or d % heads:
            raise ConfigError(f"width {d} is not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = Linear(d, d, rng, bias=False)
        self.k_proj = Linear(d, d, rng, bias=False)
        self.v_proj = Linear(d, d, rng, bias=False)
        self.o_proj = Linear(d, d, rng)

    def forward(self, q: Tensor, k: Tensor | None = None, v: Tensor | None = None,
                causal: bool = False) -> Tensor:
        k = q if k is None else k
        v = k if v is None else v
        ctx = T.attention_heads(self.q_proj(q), self.k_proj(k), self.v_proj(v), self.heads, causal)
        return self.o_proj(ctx)


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm residual block: self-attention then a GELU feed-forward."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, ffn_mult: int = 4):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.ffn = FeedForward(d, ffn_mult * d, rng)

    def forward(self, x: Tensor, causal: bool = False) -> Tensor:
        x = x + self.attn(self.ln1(x), causal=causal)
        return x + self.ffn(self.ln2(x))
