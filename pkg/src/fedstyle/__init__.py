"""Desk-scale simulator of federated unsupervised representation learning
with style infusion, plus the standard personalized-FL baselines."""

from . import autodiff, datasets, engine, evaluation, losses, models, style
from .config import ExperimentConfig

__all__ = [
    "autodiff", "datasets", "engine", "evaluation", "losses", "models",
    "style", "ExperimentConfig",
]

__version__ = "0.1.0"
