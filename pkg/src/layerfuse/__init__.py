"""Learned per-region fusion of encoder layers for grounding commands in images."""
from .fusion import FusionKind, fuse, param_count
from .head import Box, iou, iou05_accuracy
from .model import GroundingModel
from .numeric import ParamStore, grad_check
from .persistence import RunConfig, load_checkpoint, load_dataset, save_checkpoint
from .synthgen import SceneSpec, generate_dataset

__version__ = "0.1.0"

__all__ = [
    "Box", "FusionKind", "GroundingModel", "ParamStore", "RunConfig", "SceneSpec",
    "fuse", "generate_dataset", "grad_check", "iou", "iou05_accuracy", "load_checkpoint",
    "load_dataset", "param_count", "save_checkpoint",
]
