"""Multi-task parameter-efficient fine-tuning with task prompts and dynamic task filters."""

from .config import BackboneConfig, ModelConfig, RunConfig, TaskKind, TaskSpec, TuningMode, toy_config
from .model import TADFormer, init_params
from .mtl import compute_delta_m, count_params, multitask_loss
from .tensor import Tensor, backward
from .train import run_training

__all__ = [
    "BackboneConfig",
    "ModelConfig",
    "RunConfig",
    "TaskKind",
    "TaskSpec",
    "TuningMode",
    "toy_config",
    "TADFormer",
    "init_params",
    "compute_delta_m",
    "count_params",
    "multitask_loss",
    "Tensor",
    "backward",
    "run_training",
]
__version__ = "0.1.0"
