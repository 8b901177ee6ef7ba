"""Dual-model debiasing (LfF reweighting plus layer-wise cosine constraints) on NumPy MLPs."""

from .biasdata import BiasedDataset, GenConfig, conditional_entropy, generate, load_dataset, make_protocol, save_dataset, split_protocol
from .errors import (
    ConfigError,
    CosFairNetError,
    DegenerateVectorError,
    DivergenceError,
    FormatError,
    InsufficientSamplesError,
    ShapeError,
    TrainingError,
)
from .losses import ConstraintMode, LossConfig
from .model import MlpModel, forward, init_mlp, load_checkpoint, save_checkpoint
from .optim import OptimConfig
from .report import GroupAccuracy, accuracy_by_group, emit_report
from .trainer import ConstraintSchedule, TrainConfig, TrainResult, train

__version__ = "0.1.0"
