"""Desk-scale multimodal fusion on a numpy autodiff engine."""

from .adapters import AdapterKind, AdapterVariant, build_adapter, output_token_count
from .checkpoint import Checkpoint
from .data import synth_dataset
from .decoder import DecoderConfig, FusionDecoder, MultimodalSequence, Vocabulary
from .errors import (CheckpointFormatError, ConfigError, ContractError, OmniFuseError,
                     PreprocessingError, SequenceBudgetError, ShapeError, StateError)
from .evaluation import bench_adapters, evaluate, exact_match, ned
from .lora import lora_inject
from .model import FusionModel, TilingConfig, build_model
from .tensor import Tensor
from .tiling import plan_grid, split, stitch
from .trainer import TrainConfig, run_stage1, run_stage2
from .vision import PUBLISHED_ENCODERS, TOY_ENCODERS, EncoderConfig, VisionEncoder

__version__ = "0.1.0"
