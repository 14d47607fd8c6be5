"""Versioned YAML run configuration.

Unknown keys are errors, reported with their dotted path. ``load`` then
``dump`` then ``load`` gives back an equal ``RunConfig``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .adapters import AdapterVariant, output_token_count
from .data import KINDS
from .decoder import DecoderConfig, Vocabulary
from .errors import ConfigError
from .evaluation import METRICS
from .model import TilingConfig, build_model
from .tiling import visual_token_budget
from .trainer import FreezeFlags, LoraConfig, TrainConfig
from .vision import EncoderConfig, encoder_preset

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DataConfig:
    kind: str = "caption"
    n: int = 64
    seed: int = 0
    records: str | None = None  # JSONL file; overrides the synthetic set

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")


@dataclass(frozen=True)
class EvalConfig:
    metrics: tuple[str, ...] = ("exact_match", "ned")
    max_new: int = 48
    tiling: str = "off"

    def __post_init__(self):
        object.__setattr__(self, "metrics", tuple(self.metrics))
        bad = [m for m in self.metrics if m not in METRICS]
        if bad or not self.metrics:
            raise ConfigError(f"unknown metrics {bad}; available: {sorted(METRICS)}")
        if self.tiling not in ("on", "off"):
            raise ConfigError(f"tiling must be 'on' or 'off', got {self.tiling!r}")
        if self.max_new < 0:
            raise ConfigError("max_new must be >= 0")


@dataclass(frozen=True)
class DecoderSettings:
    layers: int = 2
    width: int = 64
    heads: int = 4
    max_seq_len: int = 2048
    ffn_mult: int = 4

    def __post_init__(self):
        self.build(len(Vocabulary()))  # validates

    def build(self, vocab_size: int) -> DecoderConfig:
        return DecoderConfig(self.layers, self.width, self.heads, vocab_size, self.max_seq_len,
                             self.ffn_mult)


@dataclass(frozen=True)
class RunConfig:
    encoders: tuple[EncoderConfig, ...] = (encoder_preset("cliplike"),)
    adapter: AdapterVariant = AdapterVariant()
    decoder: DecoderSettings = DecoderSettings()
    tiling: TilingConfig = TilingConfig()
    pretrain: TrainConfig | None = TrainConfig("pretrain", lr=2e-3, steps=30)
    sft: TrainConfig | None = TrainConfig("sft", lr=2e-3, steps=470)
    data: DataConfig = DataConfig()
    eval: EvalConfig = EvalConfig()
    seed: int = 0
    output_dir: str = "runs/default"
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if not 1 <= len(self.encoders) <= 2:
            raise ConfigError(f"encoders: one or two expected, got {len(self.encoders)}")
        per_view = output_token_count(self.adapter, self.encoders)
        reserve = self.tiling.text_reserve
        if self.tiling.enabled:
            tiles = self.tiling.max_tiles
            if tiles is None:
                tiles = max(1, (self.decoder.max_seq_len - reserve - 2) // per_view - 1)
            visual = visual_token_budget(tiles, per_view)
        else:
            visual = per_view
        if visual + 2 + reserve > self.decoder.max_seq_len:
            raise ConfigError(
                f"decoder.max_seq_len: {self.decoder.max_seq_len} < {visual} visual tokens "
                f"+ 2 markers + {reserve} reserved text positions"
            )
        for name in ("pretrain", "sft"):
            stage = getattr(self, name)
            if stage is None:
                continue
            if stage.stage != name:
                raise ConfigError(f"{name}.stage: expected {name!r}, got {stage.stage!r}")
            if stage.seq_len != self.decoder.max_seq_len:
                raise ConfigError(f"{name}.seq_len: {stage.seq_len} differs from "
                                  f"decoder.max_seq_len {self.decoder.max_seq_len}")
        if self.pretrain is None and self.sft is None:
            raise ConfigError("at least one of pretrain/sft must be configured")

    def build_model(self):
        vocab = Vocabulary()
        return build_model(self.encoders, self.adapter, self.decoder.build(len(vocab)),
                           self.tiling, self.seed, vocab)

    def stage(self, name: str) -> TrainConfig:
        cfg = getattr(self, name)
        if cfg is None:
            raise ConfigError(f"stage {name!r} is not configured")
        return dataclasses.replace(cfg, seed=self.seed, tiling=self.tiling.enabled)


# -- parsing ------------------------------------------------------------------

def _build(cls, raw: Any, path: str, convert=None):
    """Construct dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key")
    kwargs = dict(raw)
    for key, fn in (convert or {}).items():
        if key in kwargs:
            kwargs[key] = fn(kwargs[key], f"{path}.{key}")
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _encoder(raw: Any, path: str) -> EncoderConfig:
    if isinstance(raw, str):
        return encoder_preset(raw)
    if isinstance(raw, dict) and set(raw) == {"preset"}:
        return encoder_preset(raw["preset"])
    return _build(EncoderConfig, raw, path)


def _stage(name: str):
    def convert(raw: Any, path: str) -> TrainConfig | None:
        if raw is None:
            return None
        if isinstance(raw, dict):
            for key in ("seed", "tiling"):
                if key in raw:
                    raise ConfigError(f"{path}.{key}: set at the top level, not per stage")
        if isinstance(raw, dict) and "stage" not in raw:
            raw = {**raw, "stage": name}
        return _build(TrainConfig, raw, path, {
            "freeze": lambda r, p: None if r is None else _build(FreezeFlags, r, p),
            "lora": lambda r, p: None if r is None else _build(LoraConfig, r, p),
        })
    return convert


def from_dict(raw: Any) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")

    def encoders(r, p):
        if not isinstance(r, list):
            raise ConfigError(f"{p}: expected a list")
        return tuple(_encoder(e, f"{p}[{i}]") for i, e in enumerate(r))

    return _build(RunConfig, raw, "config", {
        "encoders": encoders,
        "adapter": lambda r, p: _build(AdapterVariant, r, p),
        "decoder": lambda r, p: _build(DecoderSettings, r, p),
        "tiling": lambda r, p: _build(TilingConfig, r, p),
        "pretrain": _stage("pretrain"),
        "sft": _stage("sft"),
        "data": lambda r, p: _build(DataConfig, r, p),
        "eval": lambda r, p: _build(EvalConfig, r, p),
    })


def to_dict(cfg: RunConfig) -> dict:
    def plain(x):
        if dataclasses.is_dataclass(x):
            return {f.name: plain(getattr(x, f.name)) for f in dataclasses.fields(x)}
        if isinstance(x, (list, tuple)):
            return [plain(v) for v in x]
        if hasattr(x, "value") and isinstance(getattr(x, "value"), str):  # enums
            return x.value
        return x

    out = plain(cfg)
    for name in ("pretrain", "sft"):
        if out[name] is not None:
            out[name].pop("stage")
            out[name].pop("seed")
            out[name].pop("tiling")
    return out


def loads(text: str) -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    return from_dict(raw)


def dumps(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def load(path) -> RunConfig:
    return loads(Path(path).read_text(encoding="utf-8"))


def dump(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(cfg), encoding="utf-8")
    return path
