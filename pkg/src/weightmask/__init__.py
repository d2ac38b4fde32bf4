"""Learn binary weight masks on frozen networks to find the subnetworks behind individual functions."""
from . import tensor
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .masks import (
    BinaryMask,
    MaskSet,
    apply_mask,
    binarize_ste,
    biased_reinit,
    init_mask,
    invert,
    multi_sample_step,
    regularizer,
    sample_binary,
    sample_soft,
    threshold,
)
from .metrics import iomin, iou, per_layer_sharing
from .models import FeedForwardNet, LSTMNet, PresentationSchedule
from .optim import AdamState, ParamStore, adam_step, clip_global_norm
from .tensor import NonFiniteError, ShapeError, Tensor

__version__ = "0.1.0"

__all__ = [
    "AdamState", "BinaryMask", "Checkpoint", "ExperimentConfig", "FeedForwardNet", "LSTMNet", "MaskSet",
    "NonFiniteError", "ParamStore", "PresentationSchedule", "ShapeError", "Tensor", "adam_step",
    "apply_mask", "binarize_ste", "biased_reinit", "clip_global_norm", "init_mask", "invert", "iomin",
    "iou", "load_checkpoint", "load_config", "multi_sample_step", "per_layer_sharing", "regularizer",
    "sample_binary", "sample_soft", "save_checkpoint", "tensor", "threshold",
]
