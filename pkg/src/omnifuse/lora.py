"""Low-rank adapters on frozen linear layers."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .nn import Linear, Module, Parameter, init_normal
from .tensor import Tensor

DEFAULT_TARGETS = ("q_proj", "v_proj")


class LoRALinear(Linear):
    """A frozen ``Linear`` plus ``(alpha/rank) * x @ lora_A @ lora_B``.

    ``weight``/``bias`` are the very Parameter objects of the wrapped layer,
    so parameter names and checkpoints keep their meaning after injection.
    ``lora_B`` starts at zero, which makes the wrapped layer an exact no-op
    change at initialisation.
    """

    def __init__(self, base: Linear, rank: int, alpha: float, rng: np.random.Generator):
        if rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {rank}")
        self.d_in, self.d_out = base.d_in, base.d_out
        self.weight, self.bias = base.weight, base.bias
        self.weight.requires_grad = False
        if self.bias is not None:
            self.bias.requires_grad = False
        self.rank, self.alpha = rank, float(alpha)
        self.scale = self.alpha / rank
        self.lora_A = Parameter(init_normal(rng, (self.d_in, rank), self.d_in ** -0.5))
        self.lora_B = Parameter(np.zeros((rank, self.d_out)))

    def forward(self, x: Tensor) -> Tensor:
        y = super().forward(x)
        return y + ((x @ self.lora_A) @ self.lora_B) * self.scale

    def delta(self) -> np.ndarray:
        """The effective additive update to ``weight``."""
        return self.scale * self.lora_A.data @ self.lora_B.data


def lora_inject(model: Module, rank: int = 4, alpha: float = 8.0,
                targets: tuple[str, ...] = DEFAULT_TARGETS, seed: int = 0) -> Module:
    """Freeze every parameter of ``model`` and wrap the targeted linears in place.

    Returns the same object. Already-wrapped layers are left alone.
    """
    if rank < 1:
        raise ConfigError(f"LoRA rank must be >= 1, got {rank}")
    if not targets:
        raise ConfigError("LoRA needs at least one target projection")
    rng = np.random.default_rng(seed)
    model.freeze()
    wrapped = 0

    def visit(module: Module) -> None:
        nonlocal wrapped
        for name, value in list(vars(module).items()):
            if isinstance(value, Linear) and name in targets:
                if not isinstance(value, LoRALinear):
                    setattr(module, name, LoRALinear(value, rank, alpha, rng))
                wrapped += 1
            elif isinstance(value, Module):
                visit(value)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        visit(item)

    visit(model)
    if not wrapped:
        raise ConfigError(f"no linear layer named any of {targets} found")
    for name, p in model.named_parameters():
        if name.rsplit(".", 1)[-1] in ("lora_A", "lora_B"):
            p.requires_grad = True
    return model


def lora_parameters(model: Module) -> list[tuple[str, Parameter]]:
    return [(n, p) for n, p in model.named_parameters() if n.rsplit(".", 1)[-1] in ("lora_A", "lora_B")]
