"""Adversarial source reweighting with power-maximization losses, on numpy."""

from .adapt_ext import OpenSetConfig, TTAState, classify_with_unknown, train_open_universal, tta_step
from .nets import Discriminator, RecognitionModel, load_checkpoint, save_checkpoint
from .reweight import WeightVector, learn_weights, solve_weights
from .scenario import Dataset, ScenarioSpec, generate_scenario
from .trainer import TrainConfig, TrainLog, train

__all__ = [
    "Dataset", "Discriminator", "OpenSetConfig", "RecognitionModel", "ScenarioSpec", "TTAState",
    "TrainConfig", "TrainLog", "WeightVector", "classify_with_unknown", "generate_scenario",
    "learn_weights", "load_checkpoint", "save_checkpoint", "solve_weights", "train",
    "train_open_universal", "tta_step",
]
