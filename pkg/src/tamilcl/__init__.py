"""Continual learning with task attention modules and experience rehearsal."""

from .buffer import BufferEntry, ReservoirBuffer
from .engine import EvalMode, TrainConfig, evaluate, infer_tam, run_stream, train_task
from .losses import LossConfig
from .model import ModelConfig, Tam, TamilModel
from .taskdata import SyntheticConfig, TaskSpec, TaskStream, generate_synthetic, load_stream, minibatches

__version__ = "0.1.0"

__all__ = [
    "BufferEntry",
    "EvalMode",
    "LossConfig",
    "ModelConfig",
    "ReservoirBuffer",
    "SyntheticConfig",
    "Tam",
    "TamilModel",
    "TaskSpec",
    "TaskStream",
    "TrainConfig",
    "evaluate",
    "generate_synthetic",
    "infer_tam",
    "load_stream",
    "minibatches",
    "run_stream",
    "train_task",
]
