"""Two-stage training: adapter pretraining, then supervised fine-tuning.

Stage 1 (``pretrain``) updates only the adapter and the <boi>/<eoi>
embeddings. Stage 2 (``sft``) also updates the LM, either fully or through
LoRA factors with the base weights frozen.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .data import Record
from .errors import ConfigError, StateError
from .lora import DEFAULT_TARGETS, lora_inject
from .model import Example, FusionModel
from .nn import Parameter

log = logging.getLogger(__name__)

STAGES = ("pretrain", "sft")
FULL_PROFILE = {"pretrain": {"lr": 1e-3, "batch_size": 256}, "sft": {"lr": 2e-5, "batch_size": 128}}
DESK_BATCH = 8
DESK_MAX_STEPS = 500


@dataclass(frozen=True)
class FreezeFlags:
    """True means the group is frozen."""

    encoders: bool = True
    adapter: bool = False
    special_tokens: bool = False
    lm: bool = True


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 4
    alpha: float = 8.0
    targets: tuple[str, ...] = DEFAULT_TARGETS

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"lora.rank must be >= 1, got {self.rank}")
        object.__setattr__(self, "targets", tuple(self.targets))


@dataclass(frozen=True)
class TrainConfig:
    """``lr``/``batch_size``/``freeze`` left as None take the stage defaults."""

    stage: str = "pretrain"
    lr: float | None = None
    batch_size: int | None = None
    weight_decay: float = 0.0
    seq_len: int = 2048
    precision: str = "f64"
    steps: int = 100
    warmup_frac: float = 0.03
    clip_norm: float | None = 1.0
    freeze: FreezeFlags | None = None
    lora: LoraConfig | None = None
    seed: int = 0
    profile: str = "desk"
    tiling: bool = False

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.profile not in ("desk", "full"):
            raise ConfigError(f"profile must be 'desk' or 'full', got {self.profile!r}")
        if self.precision not in ("f64", "f32"):
            raise ConfigError(f"precision must be 'f64' or 'f32', got {self.precision!r}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.profile == "desk" and self.steps > DESK_MAX_STEPS:
            raise ConfigError(f"desk profile allows at most {DESK_MAX_STEPS} steps, got {self.steps}")
        if self.lr is not None and not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError("warmup_frac must be in [0, 1)")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive or None")

    def resolved(self) -> "TrainConfig":
        """Fill stage defaults; any departure from the published values is logged."""
        full = FULL_PROFILE[self.stage]
        lr, batch = self.lr, self.batch_size
        if lr is None:
            lr = full["lr"]
        elif lr != full["lr"]:
            log.info("%s lr overridden: %g (published %g)", self.stage, lr, full["lr"])
        if batch is None:
            batch = full["batch_size"] if self.profile == "full" else DESK_BATCH
            if batch != full["batch_size"]:
                log.info("%s batch scaled for the desk profile: %d -> %d",
                         self.stage, full["batch_size"], batch)
        elif batch != full["batch_size"]:
            log.info("%s batch overridden: %d (published %d)", self.stage, batch,
                     full["batch_size"])
        freeze = self.freeze
        if freeze is None:
            freeze = FreezeFlags(lm=self.stage == "pretrain" or self.lora is not None)
        return replace(self, lr=lr, batch_size=batch, freeze=freeze)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, total: int, peak: float, warmup_frac: float) -> float:
    """Linear warmup over ``ceil(warmup_frac * total)`` steps, then constant."""
    warmup = math.ceil(warmup_frac * total)
    if step < warmup:
        return peak * (step + 1) / warmup
    return peak


class AdamW:
    """Adam with decoupled weight decay; state is keyed by parameter name."""

    def __init__(self, params: Mapping[str, Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            if self.weight_decay:
                p.data = p.data * (1 - lr * self.weight_decay)
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def moments(self) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        return dict(self.m), dict(self.v)


def clip_gradients(params: Sequence[Parameter], max_norm: float | None) -> float:
    """Scale gradients in place to global norm ``max_norm``; returns the norm before."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = T.global_norm(grads)
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def prepare_examples(model: FusionModel, data: Sequence[Record | Example],
                     tiling: bool) -> list[Example]:
    """Encode each record once; frozen encoder features are cached for the run."""
    out = []
    for r in data:
        if isinstance(r, Example):
            out.append(r)
        else:
            out.append(model.prepare(r.image, r.prompt, r.reference, tiling=tiling, id=r.id))
    return out


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)


def _train(model: FusionModel, data, cfg: TrainConfig, log_path=None) -> TrainResult:
    T.set_precision(cfg.precision)
    examples = prepare_examples(model, data, cfg.tiling)
    if not examples:
        raise ConfigError("training data is empty")
    trainable = {n: p for n, p in model.named_parameters() if p.requires_grad}
    if not trainable:
        raise ConfigError("nothing to train: every parameter group is frozen")
    opt = AdamW(trainable, cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    order, cursor = rng.permutation(len(examples)), 0
    batch_size = min(cfg.batch_size, len(examples))
    history = []
    sink = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        sink = open(log_path, "a", encoding="utf-8")
    try:
        for step in range(cfg.steps):
            if cursor + batch_size > len(order):
                order, cursor = rng.permutation(len(examples)), 0
            batch = [examples[i] for i in order[cursor:cursor + batch_size]]
            cursor += batch_size
            opt.zero_grad()
            loss = model.batch_loss(batch)
            loss.backward()
            norm = clip_gradients(list(trainable.values()), cfg.clip_norm)
            lr = lr_at(step, cfg.steps, cfg.lr, cfg.warmup_frac)
            opt.step(lr)
            entry = {"stage": cfg.stage, "step": step + 1, "loss": loss.item(), "lr": lr,
                     "grad_norm": norm}
            history.append(entry)
            if sink is not None:
                sink.write(json.dumps(entry) + "\n")
            if step % 50 == 0 or step == cfg.steps - 1:
                log.info("%s step %d loss %.4f lr %.2e |g| %.3f", cfg.stage, step + 1,
                         entry["loss"], lr, norm)
    finally:
        if sink is not None:
            sink.close()
    opt.zero_grad()
    ckpt = model.checkpoint(step=opt.t, stage=cfg.stage, optimizer=opt)
    ckpt.history = history
    return TrainResult(ckpt, history)


def run_stage1(model: FusionModel, data, cfg: TrainConfig, log_path=None) -> TrainResult:
    """Adapter + special-token pretraining; encoders and LM stay bit-identical."""
    if cfg.stage != "pretrain":
        raise ConfigError(f"run_stage1 needs stage 'pretrain', got {cfg.stage!r}")
    cfg = cfg.resolved()
    if not cfg.freeze.lm:
        raise ConfigError("stage 1 requires a frozen LM (freeze.lm = true)")
    if not cfg.freeze.encoders:
        raise ConfigError("vision encoders are always frozen (freeze.encoders = true)")
    if cfg.lora is not None:
        raise ConfigError("LoRA applies to stage 2 only")
    model.apply_freeze(**asdict(cfg.freeze))
    result = _train(model, data, cfg, log_path)
    model.completed_stages.add("pretrain")
    return result


def run_stage2(model: FusionModel, data, cfg: TrainConfig, log_path=None) -> TrainResult:
    """Supervised fine-tuning of the adapter, special tokens and the LM (full or LoRA)."""
    if cfg.stage != "sft":
        raise ConfigError(f"run_stage2 needs stage 'sft', got {cfg.stage!r}")
    if "pretrain" not in model.completed_stages:
        raise StateError("stage 2 needs a stage-1 checkpoint; run or load stage 1 first")
    cfg = cfg.resolved()
    if not cfg.freeze.encoders:
        raise ConfigError("vision encoders are always frozen (freeze.encoders = true)")
    if cfg.lora is not None:
        if not cfg.freeze.lm:
            raise ConfigError("LoRA fine-tuning keeps the base LM frozen (freeze.lm = true)")
        if not model.has_lora:
            lora_inject(model.decoder, cfg.lora.rank, cfg.lora.alpha, cfg.lora.targets,
                        seed=cfg.seed)
    model.apply_freeze(**asdict(cfg.freeze))
    result = _train(model, data, cfg, log_path)
    model.completed_stages.add("sft")
    return result
