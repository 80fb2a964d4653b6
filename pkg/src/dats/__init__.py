"""Domain-adversarial training under target label shift.

Learns domain-invariant features while estimating the unknown target label
proportions, and reweights the domain adversary and the source domains with
those estimates.
"""

from .datagen import DomainDataset, SyntheticSpec, generate, load_tabular, proportion_sweep
from .errors import DatsError
from .model_io import load_model, save_model
from .proportions import solve_proportions_closed_form
from .trainer import TrainingConfig, evaluate, predict_proba, train

__version__ = "0.1.0"

__all__ = [
    "DatsError",
    "DomainDataset",
    "SyntheticSpec",
    "TrainingConfig",
    "evaluate",
    "generate",
    "load_model",
    "load_tabular",
    "predict_proba",
    "proportion_sweep",
    "save_model",
    "solve_proportions_closed_form",
    "train",
]
