"""Federated domain generalization on synthetic data, from the tensors up.

Layers: a small reverse-mode autodiff engine (tensor), SGD (optim), style
statistics and feature-space augmentation (styles), the attention-based
feature highlighter (attention), the CNN with its style hooks (model), the
federated-averaging protocol (federation), the synthetic multi-domain
corpus (data), and the experiment harness (config, experiment, cli).
"""

from . import attention, config, data, experiment, federation, model, optim, styles, tensor
from .config import ConfigError, ExperimentConfig, parse_config, read_config, serialize_config
from .data import CorpusConfig, DomainSpec, SyntheticCorpus, default_domains, generate_corpus
from .federation import FederationConfig, run_federation
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .styles import ExplorationParams, StyleInfo, StyleStats
from .tensor import NumericError, ShapeError, Tape, Tensor

__all__ = [
    "ConfigError",
    "CorpusConfig",
    "DomainSpec",
    "ExperimentConfig",
    "ExplorationParams",
    "FederationConfig",
    "ModelConfig",
    "NumericError",
    "ShapeError",
    "StyleInfo",
    "StyleStats",
    "SyntheticCorpus",
    "Tape",
    "Tensor",
    "attention",
    "config",
    "data",
    "default_domains",
    "experiment",
    "federation",
    "generate_corpus",
    "init_params",
    "load_checkpoint",
    "model",
    "optim",
    "parse_config",
    "read_config",
    "run_federation",
    "save_checkpoint",
    "serialize_config",
    "styles",
    "tensor",
]

__version__ = "0.1.0"
