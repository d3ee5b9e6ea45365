"""Attention encoder-decoder training with weak alignment supervision, at desk scale."""

from .losses import ctc_loss, frame_alignment_ce, smoothed_ce
from .model import DecoderConfig, EncoderConfig, Seq2Seq
from .train import LossConfig, TrainSchedule, loss_rows, train

__version__ = "0.1.0"

__all__ = [
    "DecoderConfig",
    "EncoderConfig",
    "LossConfig",
    "Seq2Seq",
    "TrainSchedule",
    "ctc_loss",
    "frame_alignment_ce",
    "loss_rows",
    "smoothed_ce",
    "train",
]
