"""Entropy-regularized distillation between multi-exit convolutional classifiers."""

__version__ = "0.1.0"

from .tensor import Tensor, Tape, ShapeError, NonFiniteError
from .nn import ArchConfig, BlockSpec, MultiExitNetwork, build_network, preset_config
from .losses import (LossWeights, LossBreakdown, kl_distill, cross_entropy,
                     entropy_regularizer, teacher_correct_mask, erde_total,
                     kd_baseline, ce_joint)
from .optim import Adam
from .data import Dataset, SplitSpec, Splits, load_cifar_binary, load_idx, \
    synth_generate, split_dataset, standardize_splits
from .exits import (ExitTrace, MacTable, SweepConfig, SweepReport, entropy_score,
                    early_exit_infer, mac_count, trace_dataset, sweep, latency_probe)
from .train import TrainConfig, TrainLog, train, evaluate_exit_accuracy
from .weights import save_weights, load_network, load_weights
from .augment import AugmentConfig, augment_batch

__all__ = [
    "Tensor", "Tape", "ShapeError", "NonFiniteError",
    "ArchConfig", "BlockSpec", "MultiExitNetwork", "build_network", "preset_config",
    "LossWeights", "LossBreakdown", "kl_distill", "cross_entropy",
    "entropy_regularizer", "teacher_correct_mask", "erde_total", "kd_baseline",
    "ce_joint",
    "Adam",
    "Dataset", "SplitSpec", "Splits", "load_cifar_binary", "load_idx",
    "synth_generate", "split_dataset", "standardize_splits",
    "ExitTrace", "MacTable", "SweepConfig", "SweepReport", "entropy_score",
    "early_exit_infer", "mac_count", "trace_dataset", "sweep", "latency_probe",
    "TrainConfig", "TrainLog", "train", "evaluate_exit_accuracy",
    "save_weights", "load_network", "load_weights",
    "AugmentConfig", "augment_batch",
]
