"""Toy ViT-style vision encoders that emit the hidden states of every block.

Geometry of the public backbones (patch size, input resolution,
depth, width, feature layer); weights are random, seeded and frozen.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, PreprocessingError, StateError
from .imaging import check_image, letterbox
from .nn import Linear, Module, Parameter, TransformerBlock, init_normal
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    name: str
    patch_size: int
    input_resolution: int
    num_layers: int
    hidden_dim: int
    num_heads: int
    feature_layer: int = -1
    mlp_ratio: int = 4

    def __post_init__(self):
        for attr in ("patch_size", "input_resolution", "num_layers", "hidden_dim", "num_heads"):
            if getattr(self, attr) < 1:
                raise ConfigError(f"encoder {self.name!r}: {attr} must be positive")
        if self.input_resolution % self.patch_size:
            raise ConfigError(
                f"encoder {self.name!r}: resolution {self.input_resolution} is not a multiple "
                f"of patch size {self.patch_size}"
            )
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"encoder {self.name!r}: hidden_dim not divisible by num_heads")
        if not -self.num_layers <= self.feature_layer <= -1:
            raise ConfigError(
                f"encoder {self.name!r}: feature_layer {self.feature_layer} outside "
                f"[-{self.num_layers}, -1]"
            )

    @property
    def grid_size(self) -> int:
        return self.input_resolution // self.patch_size

    @property
    def token_count(self) -> int:
        return self.grid_size ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size ** 2

    def to_dict(self) -> dict:
        return asdict(self)


# Public geometry of four common backbones.
PUBLISHED_ENCODERS: dict[str, EncoderConfig] = {
    "clip-vit-bigg-14": EncoderConfig("clip-vit-bigg-14", 14, 224, 48, 1664, 16, -2),
    "clip-vit-large-14": EncoderConfig("clip-vit-large-14", 14, 336, 24, 1024, 16, -2),
    "siglip-base-16-512": EncoderConfig("siglip-base-16-512", 16, 512, 12, 768, 12, -2),
    "internvit-6b-448": EncoderConfig("internvit-6b-448", 14, 448, 45, 3200, 25, -1),
}

# Desk-scale stand-ins for a CLIP-L + DINO-v2 pair.
TOY_ENCODERS: dict[str, EncoderConfig] = {
    "cliplike": EncoderConfig("cliplike", 4, 16, 3, 32, 4, -2),
    "dinolike": EncoderConfig("dinolike", 8, 24, 4, 24, 4, -2),
}


def encoder_preset(name: str) -> EncoderConfig:
    presets = {**PUBLISHED_ENCODERS, **TOY_ENCODERS}
    if name not in presets:
        raise ConfigError(f"unknown encoder preset {name!r}; known: {sorted(presets)}")
    return presets[name]


@dataclass
class LayerFeatures:
    """Hidden states after every encoder block, each ``[..., tokens, dim]``."""

    layers: list[Tensor]
    encoder: str = ""
    config: EncoderConfig | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("LayerFeatures needs at least one layer")
        shapes = {t.shape for t in self.layers}
        if len(shapes) != 1:
            raise ConfigError(f"per-layer features differ in shape: {sorted(shapes)}")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def token_count(self) -> int:
        return self.layers[0].shape[-2]

    @property
    def dim(self) -> int:
        return self.layers[0].shape[-1]

    def __getitem__(self, i: int) -> Tensor:
        return self.layers[i]

    def detached(self) -> "LayerFeatures":
        return LayerFeatures([t.detach() for t in self.layers], self.encoder, self.config)


def select_features(features: LayerFeatures, layer: int) -> Tensor:
    """Hidden states of one block, addressed from the end (-1 = last)."""
    n = features.num_layers
    if not -n <= layer <= -1:
        raise ConfigError(f"feature layer {layer} outside [-{n}, -1]")
    return features.layers[layer]


def patchify(img: np.ndarray, cfg: EncoderConfig) -> Tensor:
    """Cut ``[3, R, R]`` (or ``[B, 3, R, R]``) into row-major flattened patches.

    Each patch is flattened channel-major, giving ``[..., tokens, 3*p*p]``.
    """
    arr = np.asarray(img, dtype=np.float64)
    batched = arr.ndim == 4
    if not batched:
        arr = arr[None]
    r, p = cfg.input_resolution, cfg.patch_size
    if arr.ndim != 4 or arr.shape[1:] != (3, r, r):
        raise PreprocessingError(
            f"encoder {cfg.name!r} expects [3, {r}, {r}] images, got {np.asarray(img).shape}"
        )
    g = cfg.grid_size
    b = arr.shape[0]
    patches = arr.reshape(b, 3, g, p, g, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, g * g, -1)
    return Tensor(patches if batched else patches[0])


class VisionEncoder(Module):
    """Patch embedding + learned positions + pre-norm transformer blocks.

    No class token is added; the emitted stream holds patch tokens only.
    Parameters are frozen on creation.
    """

    def __init__(self, cfg: EncoderConfig, seed: int | None = None):
        self.cfg = cfg
        self.blocks: list[TransformerBlock] = []
        self.patch_embed: Linear | None = None
        self.pos_embed: Parameter | None = None
        if seed is not None:
            self.initialize(seed)

    @property
    def initialized(self) -> bool:
        return self.patch_embed is not None

    def initialize(self, seed: int) -> "VisionEncoder":
        cfg = self.cfg
        rng = np.random.default_rng(seed)
        self.patch_embed = Linear(cfg.patch_dim, cfg.hidden_dim, rng)
        self.pos_embed = Parameter(init_normal(rng, (cfg.token_count, cfg.hidden_dim), 0.1))
        self.blocks = [
            TransformerBlock(cfg.hidden_dim, cfg.num_heads, rng, cfg.mlp_ratio)
            for _ in range(cfg.num_layers)
        ]
        self.freeze()
        return self

    def preprocess(self, img: np.ndarray) -> np.ndarray:
        return letterbox(check_image(img), self.cfg.input_resolution)

    def encode_patches(self, patches: Tensor) -> LayerFeatures:
        if not self.initialized:
            raise StateError(f"encoder {self.cfg.name!r} has no weights; call initialize(seed)")
        x = self.patch_embed(patches) + self.pos_embed
        hidden = []
        for block in self.blocks:
            x = block(x)
            hidden.append(x)
        return LayerFeatures(hidden, self.cfg.name, self.cfg)

    def encode(self, img: np.ndarray) -> LayerFeatures:
        """Hidden states after every block for one image."""
        return self.encode_patches(patchify(self.preprocess(img), self.cfg))

    def encode_batch(self, images: Sequence[np.ndarray]) -> LayerFeatures:
        """Same as :meth:`encode` with a leading batch axis on every layer."""
        stacked = np.stack([self.preprocess(img) for img in images])
        return self.encode_patches(patchify(stacked, self.cfg))

    def features(self, img: np.ndarray) -> Tensor:
        return select_features(self.encode(img), self.cfg.feature_layer)


def encode_frozen(encoder: VisionEncoder, images: Sequence[np.ndarray]) -> LayerFeatures:
    with T.no_grad():
        return encoder.encode_batch(images)
