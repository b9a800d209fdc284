"""Federated domain-generalization sandbox with collaborative style
augmentation, built on a small self-contained autodiff engine."""

from .data import DomainDataset, DomainStyle, default_styles, make_domains
from .errors import FedstyleError
from .federation import RoundConfig, accuracy, run_federation
from .harness import (ExperimentConfig, benchmark_config, load_config,
                      run_experiment)
from .losses import LossWeights
from .model import BackboneConfig, Model, init_model
from .styleaug import CsaConfig

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "CsaConfig", "DomainDataset", "DomainStyle",
    "ExperimentConfig", "FedstyleError", "LossWeights", "Model",
    "RoundConfig", "accuracy", "benchmark_config", "default_styles",
    "init_model", "load_config", "make_domains", "run_experiment",
    "run_federation", "__version__",
]
