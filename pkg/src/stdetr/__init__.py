"""Spatio-temporal detection transformer on a from-scratch autodiff core."""

from .model import ModelConfig, STDETR
from .synthdata import DatasetSpec, FrameSequence

__all__ = ["ModelConfig", "STDETR", "DatasetSpec", "FrameSequence"]
__version__ = "0.1.0"
