"""Character-level decoder-only LM with trainable begin/end-of-image tokens.

Visual tokens produced by an adapter are spliced into the text embedding
stream as ``<boi> v_1 ... v_L <eoi>``. ``<boi>``/``<eoi>`` embeddings live in
their own parameter so they can train while ordinary token embeddings stay
frozen.
"""

from __future__ import annotations

import math
import string
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, SequenceBudgetError, ShapeError
from .nn import LayerNorm, Linear, Module, Parameter, TransformerBlock, init_normal
from .tensor import Tensor

PAD, BOS, EOS, BOI, EOI = "<pad>", "<bos>", "<eos>", "<boi>", "<eoi>"
RESERVED = (PAD, BOS, EOS, BOI, EOI)
DEFAULT_CHARSET = "".join(c for c in string.printable if c.isprintable()) + "\n"


class Vocabulary:
    """Bijective token <-> id map; reserved tokens take ids 0..4."""

    def __init__(self, chars: str = DEFAULT_CHARSET):
        if len(set(chars)) != len(chars):
            raise ConfigError("vocabulary characters must be unique")
        self.tokens: list[str] = [*RESERVED, *chars]
        self.ids = {tok: i for i, tok in enumerate(self.tokens)}
        self.chars = chars

    def __len__(self) -> int:
        return len(self.tokens)

    pad_id = property(lambda self: self.ids[PAD])
    bos_id = property(lambda self: self.ids[BOS])
    eos_id = property(lambda self: self.ids[EOS])
    boi_id = property(lambda self: self.ids[BOI])
    eoi_id = property(lambda self: self.ids[EOI])

    def encode(self, text: str) -> list[int]:
        try:
            return [self.ids[c] for c in text]
        except KeyError as exc:
            raise ConfigError(f"character {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.tokens[i] for i in ids if self.tokens[i] not in RESERVED)


@dataclass(frozen=True)
class TextRun:
    ids: tuple[int, ...]
    supervised: bool = False


@dataclass(frozen=True)
class ImageSlot:
    slot: int
    length: int


Segment = Union[TextRun, ImageSlot]


@dataclass
class MultimodalSequence:
    """Ordered text runs and image slots; each slot is wrapped in <boi>/<eoi>."""

    segments: list[Segment] = field(default_factory=list)
    boi_id: int = 3
    eoi_id: int = 4

    def __len__(self) -> int:
        return sum(len(s.ids) if isinstance(s, TextRun) else s.length + 2 for s in self.segments)

    @property
    def image_slots(self) -> list[ImageSlot]:
        return [s for s in self.segments if isinstance(s, ImageSlot)]

    def token_ids(self) -> np.ndarray:
        """Per-position ids; visual positions hold -1."""
        out: list[int] = []
        for s in self.segments:
            if isinstance(s, TextRun):
                out.extend(s.ids)
            else:
                out.extend([self.boi_id, *([-1] * s.length), self.eoi_id])
        return np.array(out, dtype=np.int64)

    def loss_mask(self) -> np.ndarray:
        """True where the token at that position is supervised."""
        out: list[bool] = []
        for s in self.segments:
            if isinstance(s, TextRun):
                out.extend([s.supervised] * len(s.ids))
            else:
                out.extend([False] * (s.length + 2))
        return np.array(out, dtype=bool)

    def next_token_targets(self) -> tuple[np.ndarray, np.ndarray]:
        """Targets and mask aligned with logits: position t predicts token t+1."""
        ids, mask = self.token_ids(), self.loss_mask()
        targets = np.concatenate([ids[1:], [0]])
        keep = np.concatenate([mask[1:], [False]])
        return np.where(keep, targets, 0), keep

    def extended(self, ids: Sequence[int]) -> "MultimodalSequence":
        return MultimodalSequence([*self.segments, TextRun(tuple(ids))], self.boi_id, self.eoi_id)


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 2
    width: int = 32
    heads: int = 4
    vocab_size: int = 0
    max_seq_len: int = 2048
    ffn_mult: int = 4

    def __post_init__(self):
        if min(self.layers, self.width, self.heads, self.max_seq_len, self.ffn_mult) < 1:
            raise ConfigError("decoder sizes must be positive")
        if self.width % self.heads:
            raise ConfigError(f"decoder width {self.width} not divisible by {self.heads} heads")
        if self.vocab_size < len(RESERVED) + 1:
            raise ConfigError(f"vocab_size {self.vocab_size} too small")

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_positions(length: int, width: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    freq = np.exp(-math.log(10000.0) * (np.arange(0, width, 2) / width))
    table = np.zeros((length, width))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: width // 2])
    return table


class Generated(NamedTuple):
    tokens: list[int]
    truncated: bool


class FusionDecoder(Module):
    def __init__(self, cfg: DecoderConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.width
        self.tok_emb = Parameter(init_normal(rng, (cfg.vocab_size, d), 1.0))
        self.special = Parameter(init_normal(rng, (2, d), 1.0))  # rows: <boi>, <eoi>
        self.blocks = [TransformerBlock(d, cfg.heads, rng, cfg.ffn_mult) for _ in range(cfg.layers)]
        self.ln_f = LayerNorm(d)
        self.head = Linear(d, cfg.vocab_size, rng)
        self._positions = sinusoidal_positions(cfg.max_seq_len, d)

    def lm_parameters(self) -> list[Parameter]:
        return [p for name, p in self.named_parameters() if not name.startswith("special")]

    def embed_and_splice(self, seq: MultimodalSequence, visual: Sequence[Tensor]) -> Tensor:
        """Token embeddings for text runs; ``<boi>``, visual tokens, ``<eoi>`` per slot."""
        total = len(seq)
        if total > self.cfg.max_seq_len:
            raise SequenceBudgetError(total, self.cfg.max_seq_len)
        slots = seq.image_slots
        if len(slots) != len(visual):
            raise ContractError(f"{len(slots)} image slots but {len(visual)} visual inputs")
        parts: list[Tensor] = []
        for s in seq.segments:
            if isinstance(s, TextRun):
                if s.ids:
                    parts.append(T.take_rows(self.tok_emb, list(s.ids)))
                continue
            v = visual[s.slot]
            if v.ndim != 2 or v.shape != (s.length, self.cfg.width):
                raise ShapeError(
                    f"image slot {s.slot} expects [{s.length}, {self.cfg.width}], got {v.shape}"
                )
            parts.extend([self.special[0:1], v, self.special[1:2]])
        if not parts:
            raise ContractError("empty sequence")
        return parts[0] if len(parts) == 1 else T.concat(parts, axis=0)

    def forward(self, embeddings: Tensor) -> Tensor:
        """Causal decoder: ``[..., T, d]`` embeddings to ``[..., T, vocab]`` logits."""
        length = embeddings.shape[-2]
        if length > self.cfg.max_seq_len:
            raise SequenceBudgetError(length, self.cfg.max_seq_len)
        x = embeddings + self._positions[:length]
        for block in self.blocks:
            x = block(x, causal=True)
        return self.head(self.ln_f(x))

    def generate(self, prompt: MultimodalSequence, visual: Sequence[Tensor], max_new: int,
                 eos_id: int = 2) -> Generated:
        """Greedy decoding until ``eos_id`` or ``max_new`` tokens."""
        tokens: list[int] = []
        if max_new <= 0:
            return Generated(tokens, False)
        with T.no_grad():
            prefix = self.embed_and_splice(prompt, visual)
            for _ in range(max_new):
                if prefix.shape[0] > self.cfg.max_seq_len:
                    return Generated(tokens, True)
                logits = self.forward(prefix)
                nxt = int(np.argmax(logits.data[-1]))
                if nxt == eos_id:
                    break
                tokens.append(nxt)
                prefix = T.concat([prefix, T.take_rows(self.tok_emb, [nxt])], axis=0)
        return Generated(tokens, False)


def sequence_loss(logits: Tensor, targets, loss_mask) -> Tensor:
    """Mean cross-entropy over unmasked positions."""
    return T.cross_entropy(logits, targets, loss_mask)
