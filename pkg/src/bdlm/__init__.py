"""Block-diffusion language modelling on a small numpy autograd engine."""

from .data import PackedDataset, Vocabulary
from .decode import BlockDecoder, DecodeStats, generate, generate_batch
from .errors import (BDLMError, CheckpointError, ConfigError, DecodeContractError, DimensionError,
                     EmptyLossError, InvalidPatternError, TrainingDivergedError)
from .masking import BlockGeometry, build_inference_mask, build_training_mask, render_grid
from .model import BlockDiffusionLM, ModelConfig, load_checkpoint, save_checkpoint, train
from .tensor import precision, set_precision

__all__ = [
    "BDLMError", "BlockDecoder", "BlockDiffusionLM", "BlockGeometry", "CheckpointError", "ConfigError",
    "DecodeContractError", "DecodeStats", "DimensionError", "EmptyLossError", "InvalidPatternError",
    "ModelConfig", "PackedDataset", "TrainingDivergedError", "Vocabulary", "build_inference_mask",
    "build_training_mask", "generate", "generate_batch", "load_checkpoint", "precision", "render_grid",
    "save_checkpoint", "set_precision", "train",
]
