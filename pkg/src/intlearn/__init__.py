"""Integer-only neural network training with local-loss blocks."""

from .blocks import PRESETS, ArchHyper, Network, build_preset
from .data import load_dataset, normalize
from .itensor import IntegerOverflowError, intdiv
from .optim import IntegerSGDParams, PlateauScheduler, integer_sgd_step
from .train import TrainConfig, TrainState, evaluate, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "PRESETS", "ArchHyper", "Network", "build_preset", "load_dataset", "normalize",
    "IntegerOverflowError", "intdiv", "IntegerSGDParams", "PlateauScheduler", "integer_sgd_step",
    "TrainConfig", "TrainState", "evaluate", "fit", "load_checkpoint", "save_checkpoint",
]
