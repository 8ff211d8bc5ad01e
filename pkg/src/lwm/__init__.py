"""LWM: a self-supervised foundation model for wireless channels.

The package covers the full pipeline at desk scale: synthetic MIMO-OFDM
channel generation, patch-based masked-channel pre-training of a transformer
encoder written on an in-house autodiff engine, embedding inference, and
downstream benchmarking against raw channels.
"""

__version__ = "0.1.0"

from .channels import ChannelMatrix, DftCodebook, ScenarioConfig, add_noise, best_beam
from .model import EmbeddingOutput, LwmParameters, ModelConfig, forward_embed, param_count
from .patches import MaskSpec, PatchSequence, apply_mask, draw_mask, patchify, unpatchify
from .pretrain import Checkpoint, TrainConfig, load_checkpoint, run_pretraining, save_checkpoint
from .tensor import Tensor, backward

__all__ = [
    "ChannelMatrix",
    "Checkpoint",
    "DftCodebook",
    "EmbeddingOutput",
    "LwmParameters",
    "MaskSpec",
    "ModelConfig",
    "PatchSequence",
    "ScenarioConfig",
    "Tensor",
    "TrainConfig",
    "add_noise",
    "apply_mask",
    "backward",
    "best_beam",
    "draw_mask",
    "forward_embed",
    "load_checkpoint",
    "param_count",
    "patchify",
    "run_pretraining",
    "save_checkpoint",
    "unpatchify",
]
