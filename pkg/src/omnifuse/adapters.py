"""Vision-to-language adapters: single-encoder projectors and two-encoder fusions.

Every adapter maps encoder features (``LayerFeatures`` per encoder) to a
``[..., L_out, d_lm]`` sequence of visual tokens. Length laws:

================================  =====================
variant                           output length
================================  =====================
MlpProjector                      L
TransformerBaseline               L
ConcatFuse                        L1 + L2
LayerSumFuse                      max(L1, L2)
AttentionPoolFuse                 kv_rows (L1 + L2 with query_from="features")
TokenwiseMergeMlp                 max(L1, L2)
================================  =====================
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .nn import LayerNorm, Linear, Module, MultiHeadAttention, Parameter, TransformerBlock, init_normal
from .tensor import Tensor
from .vision import EncoderConfig, LayerFeatures, select_features


class AdapterKind(str, Enum):
    MLP_PROJECTOR = "mlp_projector"
    TRANSFORMER_BASELINE = "transformer_baseline"
    CONCAT_FUSE = "concat_fuse"
    LAYER_SUM_FUSE = "layer_sum_fuse"
    ATTENTION_POOL_FUSE = "attention_pool_fuse"
    TOKENWISE_MERGE_MLP = "tokenwise_merge_mlp"


# Number of encoders each variant consumes.
ARITY: dict[AdapterKind, tuple[int, ...]] = {
    AdapterKind.MLP_PROJECTOR: (1,),
    AdapterKind.TRANSFORMER_BASELINE: (1,),
    AdapterKind.CONCAT_FUSE: (2,),
    AdapterKind.LAYER_SUM_FUSE: (1, 2),
    AdapterKind.ATTENTION_POOL_FUSE: (1, 2),
    AdapterKind.TOKENWISE_MERGE_MLP: (2,),
}


@dataclass(frozen=True)
class AdapterVariant:
    """Which adapter to build plus its hyperparameters.

    ``hidden_dim`` is the inner width of two-layer MLPs and ``width`` the
    shared width of fusion streams; both default to the LM width.
    ``query_from`` picks the attention-pool direction: ``"learned"`` uses the
    ``kv_rows`` matrix as the query (output length ``kv_rows``),
    ``"features"`` uses the fused features as the query and the matrix as
    keys/values.
    """

    kind: AdapterKind = AdapterKind.MLP_PROJECTOR
    hidden_dim: int | None = None
    width: int | None = None
    heads: int = 4
    kv_rows: int = 576
    ffn_mult: int = 4
    query_from: str = "learned"
    pad_shorter: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", AdapterKind(self.kind))
        for attr in ("hidden_dim", "width"):
            value = getattr(self, attr)
            if value is not None and value < 1:
                raise ConfigError(f"adapter {attr} must be positive, got {value}")
        if self.heads < 1 or self.ffn_mult < 1:
            raise ConfigError("adapter heads and ffn_mult must be positive")
        if self.kv_rows < 1:
            raise ConfigError(f"kv_rows must be >= 1, got {self.kv_rows}")
        if self.query_from not in ("learned", "features"):
            raise ConfigError(f"query_from must be 'learned' or 'features', got {self.query_from!r}")

    @property
    def arity(self) -> tuple[int, ...]:
        return ARITY[self.kind]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d


def _check_arity(variant: AdapterVariant, n: int) -> None:
    if n not in variant.arity:
        raise ConfigError(
            f"{variant.kind.value} takes {' or '.join(map(str, variant.arity))} encoder(s), got {n}"
        )


def output_token_count(variant: AdapterVariant, encoders: Sequence[EncoderConfig]) -> int:
    """Exact number of visual tokens the adapter emits per view."""
    _check_arity(variant, len(encoders))
    lengths = [e.token_count for e in encoders]
    kind = variant.kind
    if kind in (AdapterKind.MLP_PROJECTOR, AdapterKind.TRANSFORMER_BASELINE):
        return lengths[0]
    if kind is AdapterKind.CONCAT_FUSE:
        return sum(lengths)
    if kind is AdapterKind.ATTENTION_POOL_FUSE:
        return variant.kv_rows if variant.query_from == "learned" else sum(lengths)
    return max(lengths)


def pad_tokens(x: Tensor, length: int) -> Tensor:
    """Append zero vectors along the token axis up to ``length``."""
    if x.shape[-2] > length:
        raise ShapeError(f"cannot pad {x.shape[-2]} tokens down to {length}")
    return T.pad(x, -2, 0, length - x.shape[-2])


def _need_tokens(x: Tensor, what: str) -> None:
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ContractError(f"{what}: empty token sequence {x.shape}")


class Adapter(Module):
    variant: AdapterVariant
    encoders: tuple[EncoderConfig, ...]

    def forward(self, features: Sequence[LayerFeatures]) -> Tensor:
        raise NotImplementedError

    def _pick(self, features: Sequence[LayerFeatures], i: int) -> Tensor:
        return select_features(features[i], self.encoders[i].feature_layer)


class MlpProjector(Adapter):
    """Per-token two-layer MLP with GELU."""

    def __init__(self, variant, encoders, d_lm, rng):
        self.variant, self.encoders = variant, tuple(encoders)
        hidden = variant.hidden_dim or d_lm
        self.fc1 = Linear(encoders[0].hidden_dim, hidden, rng)
        self.fc2 = Linear(hidden, d_lm, rng)

    def project(self, feat: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(feat)))

    def forward(self, features):
        return self.project(self._pick(features, 0))


class TransformerBaseline(Adapter):
    """One self-attention encoder block, then a linear width change."""

    def __init__(self, variant, encoders, d_lm, rng):
        self.variant, self.encoders = variant, tuple(encoders)
        d_v = encoders[0].hidden_dim
        self.block = TransformerBlock(d_v, variant.heads, rng, variant.ffn_mult)
        self.out = Linear(d_v, d_lm, rng)

    def project(self, feat: Tensor) -> Tensor:
        return self.out(self.block(feat))

    def forward(self, features):
        return self.project(self._pick(features, 0))


class ConcatFuse(Adapter):
    """Separate linear maps per encoder, token concatenation, encoder block, linear out."""

    def __init__(self, variant, encoders, d_lm, rng):
        self.variant, self.encoders = variant, tuple(encoders)
        width = variant.width or d_lm
        self.proj1 = Linear(encoders[0].hidden_dim, width, rng)
        self.proj2 = Linear(encoders[1].hidden_dim, width, rng)
        self.block = TransformerBlock(width, variant.heads, rng, variant.ffn_mult)
        self.out = Linear(width, d_lm, rng)

    def fuse(self, f1: Tensor, f2: Tensor) -> Tensor:
        _need_tokens(f1, "concat_fuse encoder 1")
        _need_tokens(f2, "concat_fuse encoder 2")
        joined = T.concat([self.proj1(f1), self.proj2(f2)], axis=-2)
        return self.out(self.block(joined))

    def forward(self, features):
        return self.fuse(self._pick(features, 0), self._pick(features, 1))


class LayerAggregator(Module):
    """Layer-normalise each block's output, map it with its own linear layer,
    and mix the layers with trainable coefficients (initialised to 1/L)."""

    def __init__(self, cfg: EncoderConfig, width: int, rng: np.random.Generator):
        self.norms = [LayerNorm(cfg.hidden_dim) for _ in range(cfg.num_layers)]
        self.projs = [Linear(cfg.hidden_dim, width, rng) for _ in range(cfg.num_layers)]
        self.coeffs = Parameter(np.full(cfg.num_layers, 1.0 / cfg.num_layers))

    def forward(self, feats: LayerFeatures) -> Tensor:
        if feats.num_layers != len(self.projs):
            raise ContractError(
                f"expected {len(self.projs)} layers of features, got {feats.num_layers}"
            )
        total = None
        for i, (norm, proj) in enumerate(zip(self.norms, self.projs)):
            term = proj(norm(feats.layers[i])) * self.coeffs[i]
            total = term if total is None else total + term
        return total


def _stack_check(feats: LayerFeatures | None, what: str) -> None:
    if feats is None or feats.num_layers == 0:
        raise ContractError(f"{what}: empty layer stack")
    _need_tokens(feats.layers[0], what)


class LayerSumFuse(Adapter):
    """All-layer aggregation per encoder, zero-pad the shorter stream, sum, GELU, linear."""

    def __init__(self, variant, encoders, d_lm, rng):
        self.variant, self.encoders = variant, tuple(encoders)
        width = variant.width or d_lm
        self.aggregators = [LayerAggregator(cfg, width, rng) for cfg in encoders]
        self.out = Linear(width, d_lm, rng)

    def fuse(self, all1: LayerFeatures, all2: LayerFeatures | None = None) -> Tensor:
        stacks = [all1] if all2 is None else [all1, all2]
        for i, s in enumerate(stacks):
            _stack_check(s, f"layer_sum_fuse encoder {i + 1}")
        streams = [agg(s) for agg, s in zip(self.aggregators, stacks)]
        length = max(s.shape[-2] for s in streams)
        total = None
        for s in streams:
            s = pad_tokens(s, length)
            total = s if total is None else total + s
        return self.out(T.gelu(total))

    def forward(self, features):
        return self.fuse(*features)


class AttentionPoolFuse(Adapter):
    """All-layer aggregation, GELU per stream, token concatenation, then
    multi-head attention against a learned ``kv_rows x width`` matrix,
    GELU and a final linear map."""

    def __init__(self, variant, encoders, d_lm, rng):
        self.variant, self.encoders = variant, tuple(encoders)
        width = variant.width or d_lm
        self.aggregators = [LayerAggregator(cfg, width, rng) for cfg in encoders]
        self.memory = Parameter(init_normal(rng, (variant.kv_rows, width), 1.0))
        self.attn = MultiHeadAttention(width, variant.heads, rng)
        self.out = Linear(width, d_lm, rng)

    def fuse(self, all1: LayerFeatures, all2: LayerFeatures | None = None) -> Tensor:
        stacks = [all1] if all2 is None else [all1, all2]
        for i, s in enumerate(stacks):
            _stack_check(s, f"attention_pool_fuse encoder {i + 1}")
        streams = [T.gelu(agg(s)) for agg, s in zip(self.aggregators, stacks)]
        fused = streams[0] if len(streams) == 1 else T.concat(streams, axis=-2)
        if self.variant.query_from == "learned":
            pooled = self.attn(self.memory, fused, fused)
        else:
            pooled = self.attn(fused, self.memory, self.memory)
        return self.out(T.gelu(pooled))

    def forward(self, features):
        return self.fuse(*features)


class TokenwiseMergeMlp(Adapter):
    """Two-layer MLP whose first layer is separate per encoder; the two
    first-layer outputs are summed (shorter stream zero-padded), passed
    through GELU and a shared output layer."""

    def __init__(self, variant, encoders, d_lm, rng):
        self.variant, self.encoders = variant, tuple(encoders)
        hidden = variant.hidden_dim or d_lm
        self.fc1_a = Linear(encoders[0].hidden_dim, hidden, rng)
        self.fc1_b = Linear(encoders[1].hidden_dim, hidden, rng)
        self.fc2 = Linear(hidden, d_lm, rng)

    def merge(self, f1: Tensor, f2: Tensor) -> Tensor:
        _need_tokens(f1, "tokenwise_merge_mlp encoder 1")
        _need_tokens(f2, "tokenwise_merge_mlp encoder 2")
        if f1.shape[-2] != f2.shape[-2] and not self.variant.pad_shorter:
            raise ContractError(
                f"token counts differ ({f1.shape[-2]} vs {f2.shape[-2]}) and pad_shorter is off"
            )
        a, b = self.fc1_a(f1), self.fc1_b(f2)
        length = max(a.shape[-2], b.shape[-2])
        return self.fc2(T.gelu(pad_tokens(a, length) + pad_tokens(b, length)))

    def forward(self, features):
        return self.merge(self._pick(features, 0), self._pick(features, 1))


_CLASSES = {
    AdapterKind.MLP_PROJECTOR: MlpProjector,
    AdapterKind.TRANSFORMER_BASELINE: TransformerBaseline,
    AdapterKind.CONCAT_FUSE: ConcatFuse,
    AdapterKind.LAYER_SUM_FUSE: LayerSumFuse,
    AdapterKind.ATTENTION_POOL_FUSE: AttentionPoolFuse,
    AdapterKind.TOKENWISE_MERGE_MLP: TokenwiseMergeMlp,
}


def build_adapter(variant: AdapterVariant, encoders: Sequence[EncoderConfig], d_lm: int,
                  seed: int = 0) -> Adapter:
    _check_arity(variant, len(encoders))
    if d_lm < 1:
        raise ConfigError("d_lm must be positive")
    rng = np.random.default_rng(seed)
    return _CLASSES[variant.kind](variant, list(encoders), d_lm, rng)
