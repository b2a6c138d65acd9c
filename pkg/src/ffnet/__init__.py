"""Volume-wise dot product layers and Fast&Focused-Net encoders in numpy."""

from ffnet.errors import (
    CorruptCheckpoint,
    CorruptFile,
    CountMismatch,
    EmptyDataset,
    EmptyImage,
    FfnError,
    NonFinite,
    ShapeMismatch,
    SpecMismatch,
)
from ffnet.tensor import VolumeGrid, dot, partition, reassemble

__version__ = "0.1.0"

__all__ = [
    "CorruptCheckpoint",
    "CorruptFile",
    "CountMismatch",
    "EmptyDataset",
    "EmptyImage",
    "FfnError",
    "NonFinite",
    "ShapeMismatch",
    "SpecMismatch",
    "VolumeGrid",
    "dot",
    "partition",
    "reassemble",
]
