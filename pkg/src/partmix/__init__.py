"""Part-level mixing regularizer for cross-modality retrieval, on a NumPy backbone."""

from .config import ConfigError, ExperimentConfig, long_schedule
from .data import DatasetSpec, Modality, generate_dataset
from .encoder import ModelDims, forward, init_params
from .evaluation import MetricsReport, RetrievalProtocol
from .losses import LossWeights, total_loss
from .training import compare, train, train_and_evaluate

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DatasetSpec", "ExperimentConfig", "LossWeights", "MetricsReport",
    "ModelDims", "Modality", "RetrievalProtocol", "compare", "forward", "generate_dataset",
    "init_params", "long_schedule", "total_loss", "train", "train_and_evaluate",
]
