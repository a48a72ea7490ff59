"""Factor transfer for network compression, built on a small numpy autodiff engine.

The package trains a teacher, a paraphraser that extracts compact teacher
factors, and a student whose translator learns to mimic those factors.
Knowledge distillation and attention transfer are available as baselines.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Dataset, load_cifar10_binary, load_mnist_idx, synth_dataset
from .errors import (CheckpointError, ConfigurationError, ContractError, DataFormatError, DegenerateBatchError,
                     DimensionError, DivergenceError, FactorTransferError)
from .losses import METHODS, FactorConfig
from .nn import Network, build_paraphraser, build_student, build_teacher, build_translator
from .tensor import Tensor, backward, no_grad, precision
from .training import Metrics, TrainConfig, evaluate, train_paraphraser, train_student, train_teacher

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "CheckpointError", "ConfigurationError", "ContractError", "DataFormatError", "Dataset",
    "DegenerateBatchError", "DimensionError", "DivergenceError", "FactorConfig", "FactorTransferError",
    "METHODS", "Metrics", "Network", "Tensor", "TrainConfig", "backward", "build_paraphraser",
    "build_student", "build_teacher", "build_translator", "evaluate", "load_checkpoint", "load_cifar10_binary", "load_mnist_idx", "no_grad",
    "precision", "save_checkpoint", "synth_dataset", "train_paraphraser", "train_student", "train_teacher",
]
