"""The assembled model: frozen encoders, an adapter, the decoder and the tiler."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .adapters import Adapter, AdapterVariant, build_adapter, output_token_count
from .checkpoint import Checkpoint, fingerprint
from .decoder import (DecoderConfig, FusionDecoder, ImageSlot, MultimodalSequence, TextRun,
                      Vocabulary)
from .errors import ConfigError, ContractError
from .imaging import check_image
from .nn import Module, Parameter
from .tensor import Tensor
from .tiling import TileLayout, default_max_tiles, plan_grid, split, visual_token_budget
from .vision import EncoderConfig, LayerFeatures, VisionEncoder

log = logging.getLogger(__name__)

PARAMETER_GROUPS = ("encoders", "adapter", "special_tokens", "lm")


@dataclass(frozen=True)
class TilingConfig:
    """``tile_res`` defaults to the first encoder's input resolution."""

    enabled: bool = False
    tile_res: int | None = None
    max_tiles: int | None = None
    text_reserve: int = 512
    per_tile_markers: bool = False

    def __post_init__(self):
        if self.tile_res is not None and self.tile_res < 1:
            raise ConfigError(f"tile_res must be positive, got {self.tile_res}")
        if self.max_tiles is not None and self.max_tiles < 1:
            raise ConfigError(f"max_tiles must be positive, got {self.max_tiles}")
        if self.text_reserve < 0:
            raise ConfigError("text_reserve must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Example:
    """A record turned into cached encoder features plus its token layout."""

    id: str
    features: list[LayerFeatures]  # one per encoder, leading axis = views
    n_views: int
    prompt: MultimodalSequence  # ends right before the answer
    sequence: MultimodalSequence | None  # prompt + supervised answer, if known
    layout: TileLayout | None = None
    reference: str = ""
    meta: dict = field(default_factory=dict)


class FusionModel(Module):
    def __init__(self, encoders: Sequence[VisionEncoder], adapter: Adapter,
                 decoder: FusionDecoder, vocab: Vocabulary, tiling: TilingConfig = TilingConfig()):
        if len(vocab) != decoder.cfg.vocab_size:
            raise ConfigError(f"vocabulary has {len(vocab)} tokens, decoder expects "
                              f"{decoder.cfg.vocab_size}")
        self.encoders = list(encoders)
        self.adapter = adapter
        self.decoder = decoder
        self.vocab = vocab
        self.tiling = tiling
        self.completed_stages: set[str] = set()
        self.seeds: dict = {}
        self.tokens_per_view = output_token_count(adapter.variant, [e.cfg for e in self.encoders])
        if self.tile_res < 1:
            raise ConfigError("tile_res must be positive")

    # -- geometry -------------------------------------------------------------

    @property
    def tile_res(self) -> int:
        return self.tiling.tile_res or self.encoders[0].cfg.input_resolution

    @property
    def max_tiles(self) -> int:
        if self.tiling.max_tiles is not None:
            return self.tiling.max_tiles
        return max(1, default_max_tiles(self.decoder.cfg.max_seq_len, self.tokens_per_view,
                                        self.tiling.text_reserve))

    def views(self, image: np.ndarray, tiling: bool) -> tuple[list[np.ndarray], TileLayout | None]:
        """The encoder inputs for one image: itself, or overview + row-major tiles."""
        image = check_image(image)
        if not tiling:
            return [image], None
        _, h, w = image.shape
        layout = plan_grid(w, h, self.tile_res, self.max_tiles)
        batch = split(image, layout)
        return [batch.overview, *batch.tiles], layout

    def visual_length(self, n_views: int) -> int:
        return visual_token_budget(n_views - 1, self.tokens_per_view)

    # -- parameters -----------------------------------------------------------

    def parameter_groups(self) -> dict[str, list[tuple[str, Parameter]]]:
        groups: dict[str, list[tuple[str, Parameter]]] = {g: [] for g in PARAMETER_GROUPS}
        for name, p in self.named_parameters():
            if name.startswith("encoders."):
                groups["encoders"].append((name, p))
            elif name.startswith("adapter."):
                groups["adapter"].append((name, p))
            elif name == "decoder.special":
                groups["special_tokens"].append((name, p))
            else:
                groups["lm"].append((name, p))
        return groups

    @property
    def has_lora(self) -> bool:
        return any(name.endswith((".lora_A", ".lora_B")) for name, _ in self.named_parameters())

    def apply_freeze(self, encoders: bool, adapter: bool, special_tokens: bool, lm: bool) -> None:
        """Set ``requires_grad`` per group (True = frozen). LoRA factors stay trainable."""
        flags = {"encoders": encoders, "adapter": adapter, "special_tokens": special_tokens, "lm": lm}
        for group, members in self.parameter_groups().items():
            for name, p in members:
                p.requires_grad = not flags[group]
                if name.endswith((".lora_A", ".lora_B")):
                    p.requires_grad = True

    def architecture(self) -> dict:
        """Everything that fixes parameter names and shapes."""
        return {
            "encoders": [e.cfg.to_dict() for e in self.encoders],
            "adapter": self.adapter.variant.to_dict(),
            "decoder": self.decoder.cfg.to_dict(),
            "vocab": self.vocab.chars,
        }

    def fingerprint(self) -> bytes:
        return fingerprint(self.architecture())

    def checkpoint(self, step: int = 0, stage: str | None = None, optimizer=None) -> Checkpoint:
        m, v = ({}, {}) if optimizer is None else optimizer.moments()
        return Checkpoint(self.state_dict(), m, v, self.fingerprint(), step, stage)

    def load_checkpoint(self, ckpt: Checkpoint) -> None:
        if ckpt.fingerprint != self.fingerprint():
            raise ConfigError("checkpoint fingerprint does not match this model's architecture")
        lora_in_ckpt = any(n.endswith((".lora_A", ".lora_B")) for n in ckpt.params)
        if lora_in_ckpt and not self.has_lora:
            raise ConfigError("checkpoint holds LoRA factors; inject LoRA before loading")
        if self.has_lora and not lora_in_ckpt:
            # Stage-1 weights into a LoRA-wrapped model: factors keep their init.
            self.load_state_dict(ckpt.params, strict=False)
            missing = set(dict(self.named_parameters())) - set(ckpt.params)
            if any(not n.endswith((".lora_A", ".lora_B")) for n in missing):
                raise ConfigError(f"checkpoint is missing parameters: {sorted(missing)[:5]}")
        else:
            self.load_state_dict(ckpt.params)
        if ckpt.stage == "pretrain":
            self.completed_stages = {"pretrain"}
        elif ckpt.stage == "sft":
            self.completed_stages = {"pretrain", "sft"}

    # -- data path ------------------------------------------------------------

    def encode_views(self, views: Sequence[np.ndarray]) -> list[LayerFeatures]:
        with T.no_grad():
            return [enc.encode_batch(views).detached() for enc in self.encoders]

    def build_sequence(self, prompt: str, answer: str | None, n_views: int) -> MultimodalSequence:
        v = self.vocab
        segs: list = [TextRun((v.bos_id,))]
        if self.tiling.per_tile_markers:
            segs += [ImageSlot(i, self.tokens_per_view) for i in range(n_views)]
        else:
            segs.append(ImageSlot(0, self.visual_length(n_views)))
        segs.append(TextRun(tuple(v.encode(prompt + "\n"))))
        if answer is not None:
            segs.append(TextRun(tuple(v.encode(answer)) + (v.eos_id,), supervised=True))
        return MultimodalSequence(segs, v.boi_id, v.eoi_id)

    def prepare(self, image: np.ndarray, prompt: str, answer: str | None = None,
                tiling: bool | None = None, id: str = "") -> Example:
        tiling = self.tiling.enabled if tiling is None else tiling
        views, layout = self.views(image, tiling)
        feats = self.encode_views(views)
        n = len(views)
        seq = None if answer is None else self.build_sequence(prompt, answer, n)
        return Example(id, feats, n, self.build_sequence(prompt, None, n), seq, layout,
                       answer or "")

    def visual_tokens(self, examples: Sequence[Example]) -> list[list[Tensor]]:
        """Adapter outputs for every example, all views in one adapter call.

        Returns, per example, the tensors that fill its image slots.
        """
        if not examples:
            raise ContractError("no examples")
        stacked = []
        for e in range(len(self.encoders)):
            n_layers = examples[0].features[e].num_layers
            layers = [
                T.concat([ex.features[e].layers[i] for ex in examples], axis=0)
                if len(examples) > 1 else examples[0].features[e].layers[i]
                for i in range(n_layers)
            ]
            stacked.append(LayerFeatures(layers, self.encoders[e].cfg.name, self.encoders[e].cfg))
        out = self.adapter(stacked)  # [sum(views), L, d]
        d = out.shape[-1]
        result, start = [], 0
        for ex in examples:
            chunk = out[start:start + ex.n_views]
            start += ex.n_views
            if self.tiling.per_tile_markers:
                result.append([chunk[i] for i in range(ex.n_views)])
            else:
                result.append([chunk.reshape(ex.n_views * self.tokens_per_view, d)])
        return result

    def batch_logits(self, examples: Sequence[Example], use_answer: bool = True):
        """Logits ``[B, T_max, V]`` for right-padded sequences, plus targets and mask."""
        visual = self.visual_tokens(examples)
        seqs = [ex.sequence if use_answer else ex.prompt for ex in examples]
        if any(s is None for s in seqs):
            raise ContractError("training examples need a reference answer")
        embs = [self.decoder.embed_and_splice(s, vis) for s, vis in zip(seqs, visual)]
        t_max = max(e.shape[0] for e in embs)
        batch = T.stack([T.pad(e, 0, 0, t_max - e.shape[0]) if e.shape[0] < t_max else e
                         for e in embs])
        targets = np.zeros((len(seqs), t_max), dtype=np.int64)
        mask = np.zeros((len(seqs), t_max), dtype=bool)
        for i, s in enumerate(seqs):
            tg, mk = s.next_token_targets()
            targets[i, :len(tg)], mask[i, :len(mk)] = tg, mk
        return self.decoder(batch), targets, mask

    def batch_loss(self, examples: Sequence[Example]) -> Tensor:
        logits, targets, mask = self.batch_logits(examples)
        return T.cross_entropy(logits, targets, mask)

    def answer(self, example: Example, max_new: int = 48):
        """Greedy answer text and the truncation flag."""
        with T.no_grad():
            visual = self.visual_tokens([example])[0]
            out = self.decoder.generate(example.prompt, visual, max_new, self.vocab.eos_id)
        return self.vocab.decode(out.tokens), out.truncated


def build_model(encoders: Sequence[EncoderConfig], variant: AdapterVariant,
                decoder: DecoderConfig, tiling: TilingConfig = TilingConfig(), seed: int = 0,
                vocab: Vocabulary | None = None) -> FusionModel:
    """Seeded construction; encoder ``i`` uses ``seed + 101 + i``."""
    vocab = vocab or Vocabulary()
    if decoder.vocab_size != len(vocab):
        raise ConfigError(f"decoder vocab_size {decoder.vocab_size} != vocabulary size {len(vocab)}")
    encs = [VisionEncoder(cfg, seed=seed + 101 + i) for i, cfg in enumerate(encoders)]
    adapter = build_adapter(variant, list(encoders), decoder.width, seed=seed + 1)
    dec = FusionDecoder(decoder, seed=seed + 2)
    model = FusionModel(encs, adapter, dec, vocab, tiling)
    model.seeds = {"seed": seed}
    model.apply_freeze(encoders=True, adapter=False, special_tokens=False, lm=True)
    return model

