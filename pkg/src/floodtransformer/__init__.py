"""Hybrid CNN-transformer flood segmentation with Flood Capacity scoring."""

from .errors import (
    CheckpointError,
    DecodeError,
    DimensionMismatch,
    DuplicateId,
    EmptyInput,
    EmptyMask,
    EmptySplit,
    FloodTransformerError,
    InvalidParam,
    NotScalar,
    ShapeMismatch,
)
from .metrics import BinaryMask, FloodReport, aggregate, binarize, flood_capacity, miou, pixel_accuracy
from .model import CnnFeatures, FloodTransformer, FusionMaps, ModelConfig, TransformerFeatures
from .tensor import Tape, Tensor, backward, no_grad

__version__ = "0.1.0"
