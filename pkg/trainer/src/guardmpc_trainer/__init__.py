"""Behavior-cloning trainer for guardmpc input-sequence approximators.

Consumes the dataset file format, fits a tanh MLP in scaled space with the
scaling frozen from the manifest, and exports the shared weight-file format
(with its load-time probe block).  Interacts with the controller toolkit
only through those files and its CLI.
"""

from .dataset import TrainingData, load_dataset, validation_split
from .train import (
    TrainResult,
    export_probe,
    export_weights,
    recompute_val_rmse,
    train,
)

__version__ = "0.1.0"
