"""Prompt-tuned vision transformers for few-shot class-incremental learning, on numpy."""
from .data import Dataset, TaskStream, generate, split_fscil
from .estimator import ASPClassifier, BackbonePretrainer
from .exceptions import (ASPError, ConfigError, ContractError, DimensionError, FormatError,
                         NumericError)
from .learner import ABLATIONS, Ablation, ASPModel, OptimConfig, evaluate, incremental_step, train_base_task
from .metrics import MetricsReport, a_avg, hacc, pd
from .objective import LossConfig
from .prompts import Hyperparams
from .runner import RunConfig, run_ablations, run_experiment, run_shot_sweep
from .tensor import Tensor
from .vit import ViTConfig, VisionTransformer

__version__ = "0.1.0"

__all__ = [
    "ABLATIONS", "ASPClassifier", "ASPError", "ASPModel", "Ablation", "BackbonePretrainer",
    "ConfigError", "ContractError", "Dataset", "DimensionError", "FormatError", "Hyperparams",
    "LossConfig", "MetricsReport", "NumericError", "OptimConfig", "RunConfig", "TaskStream",
    "Tensor", "ViTConfig", "VisionTransformer", "a_avg", "evaluate", "generate", "hacc",
    "incremental_step", "pd", "run_ablations", "run_experiment", "run_shot_sweep",
    "split_fscil", "train_base_task",
]
