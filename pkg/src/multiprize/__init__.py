"""Multi-prize lottery tickets with power-propagated scores, threshold
selection, mask-frozen finetuning and zero-kernel inference."""

from .analysis import SparsityReport, acceleration_rate, analyze, count_zero_kernels, score_histogram
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Dataset, load_cifar10, load_idx, synth_dataset, synth_splits
from .errors import ConfigError, FormatError, FullyPrunedError, MPTError, ShapeError, TrainingAborted
from .estimator import MPTClassifier
from .nn import NetworkSpec, conv_family, precision, set_precision
from .sparse_infer import bench_inference, compact_model, sparse_forward
from .supermask import (
    SelectionPolicy,
    binarize_layer,
    calibrate_threshold,
    powerprop_apply,
    powerprop_grad,
    select_mask_threshold,
    select_mask_topk,
)
from .trainer import TrainConfig, finetune, finetune_config, train_mpt

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "ConfigError",
    "Dataset",
    "FormatError",
    "FullyPrunedError",
    "MPTClassifier",
    "MPTError",
    "NetworkSpec",
    "SelectionPolicy",
    "ShapeError",
    "SparsityReport",
    "TrainConfig",
    "TrainingAborted",
    "acceleration_rate",
    "analyze",
    "bench_inference",
    "binarize_layer",
    "calibrate_threshold",
    "compact_model",
    "conv_family",
    "count_zero_kernels",
    "finetune",
    "finetune_config",
    "load_checkpoint",
    "load_cifar10",
    "load_idx",
    "powerprop_apply",
    "powerprop_grad",
    "precision",
    "save_checkpoint",
    "score_histogram",
    "select_mask_threshold",
    "select_mask_topk",
    "set_precision",
    "sparse_forward",
    "synth_dataset",
    "synth_splits",
    "train_mpt",
]
