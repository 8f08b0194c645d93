"""Ground-truth systems, datasets, training, and evaluation."""

from .truths import MultiWellPotential, ExoticPotential, GroundTruth, potential_minima
from .data import Dataset, generate_dataset, DataGenerationError
from .training import (TrainConfig, OptimizerState, TrainingDivergedError, TrainResult,
                       adamw_step, loss, grad_params, train, init_model, init_metric,
                       model_from_params, metric_from_params, initial_params)
from .evaluate import EvalReport, evaluate

__all__ = [
    "MultiWellPotential", "ExoticPotential", "GroundTruth", "potential_minima",
    "Dataset", "generate_dataset", "DataGenerationError",
    "TrainConfig", "OptimizerState", "TrainingDivergedError", "TrainResult",
    "adamw_step", "loss", "grad_params", "train", "init_model", "init_metric",
    "model_from_params", "metric_from_params", "initial_params",
    "EvalReport", "evaluate",
]
