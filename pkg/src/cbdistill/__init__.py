"""Class-balanced distillation for long-tailed classification."""
from .data import Dataset, LongTailProfile, ShotSplit, synthesize
from .losses import DistillConfig
from .model import Model
from .tensor import Tensor

__all__ = ["Dataset", "DistillConfig", "LongTailProfile", "Model", "ShotSplit", "Tensor",
           "synthesize"]
__version__ = "0.1.0"
