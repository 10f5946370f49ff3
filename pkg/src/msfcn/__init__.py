"""CPU engine and CLI for multi-scale fully convolutional LV segmentation."""

from .tensor import Tape, Tensor, backward
from .params import ParamStore, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "ParamStore",
    "load_checkpoint",
    "save_checkpoint",
    "__version__",
]
