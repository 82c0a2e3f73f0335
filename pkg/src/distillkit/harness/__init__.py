"""Desk-scale training engine: teacher pretraining, distillation with any
objective, ensemble and cross-modal transfer, and linear probing."""

from .config import (ArchSpec, DatasetSpec, DistillRunConfig, Mode, Objective,
                     OptimizerConfig, RunRecord, ScheduleConfig, stream_seed)
from .data import DeskDataset, PairedViews, get_dataset
from .models import (TinyConvNet, TinyMLP, build_model, load_checkpoint,
                     param_checksum, save_checkpoint)
from .train import (crossmodal_distill, distill, ensemble_distill,
                    evaluate_accuracy, linear_probe, train_teacher)

__all__ = [
    "ArchSpec", "DatasetSpec", "DistillRunConfig", "Mode", "Objective",
    "OptimizerConfig", "RunRecord", "ScheduleConfig", "stream_seed",
    "DeskDataset", "PairedViews", "get_dataset",
    "TinyConvNet", "TinyMLP", "build_model", "load_checkpoint",
    "param_checksum", "save_checkpoint",
    "crossmodal_distill", "distill", "ensemble_distill",
    "evaluate_accuracy", "linear_probe", "train_teacher",
]
