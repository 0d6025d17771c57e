"""Neighbor-embedding VAE: re-encoding regularized VAEs and collapse diagnostics."""

__version__ = "0.1.0"

from .autodiff import AdamState, Tape, Tensor, adam_step, backward
from .data import Dataset, SyntheticSpec, binarize, load_idx, make_synthetic, write_idx
from .losses import LossConfig, LossReport, total_loss
from .metrics import DiagnosticsReport, EvalConfig, evaluate
from .models import VAE, decode, encode, init_vae, load_checkpoint, reencode, save_checkpoint
from .training import RunLog, TrainConfig, train, train_aggressive

__all__ = [
    "AdamState", "Tape", "Tensor", "adam_step", "backward",
    "Dataset", "SyntheticSpec", "binarize", "load_idx", "make_synthetic", "write_idx",
    "LossConfig", "LossReport", "total_loss",
    "DiagnosticsReport", "EvalConfig", "evaluate",
    "VAE", "decode", "encode", "init_vae", "load_checkpoint", "reencode", "save_checkpoint",
    "RunLog", "TrainConfig", "train", "train_aggressive",
]
