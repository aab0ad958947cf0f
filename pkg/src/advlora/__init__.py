"""Adversarial low-rank adapter fine-tuning as projected descent-ascent, on numpy."""

from .attack import AscentPolicy, AttackConfig, fgsm, pgd
from .data import Dataset, load_csv, make_blobs, sample_few_shot, save_csv
from .errors import ConfigurationError, ContractError, NumericalAbort, RankError
from .evaluation import Metrics, evaluate, harmonic_mean
from .linalg import PerturbationSet, project
from .model import AdapterModel, AdapterPlacement, LoRALinear, backward, build_model, forward
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AdapterModel",
    "AdapterPlacement",
    "AscentPolicy",
    "AttackConfig",
    "ConfigurationError",
    "ContractError",
    "Dataset",
    "LoRALinear",
    "Metrics",
    "NumericalAbort",
    "PerturbationSet",
    "RankError",
    "TrainConfig",
    "backward",
    "build_model",
    "evaluate",
    "fgsm",
    "forward",
    "harmonic_mean",
    "load_csv",
    "make_blobs",
    "pgd",
    "project",
    "sample_few_shot",
    "save_csv",
    "train",
]
