"""Cross-attention pooling stream for small CNNs, with CAM-style attributions
and saliency metrics, built on a numpy reverse-mode autodiff engine."""

from .backbone import StagedBackbone, StageSpec, default_stage_specs
from .errors import CastreamError
from .model import CAClassifier
from .stream import CAStream, StreamConfig
from .tensor import Graph, Tensor

__version__ = "0.1.0"

__all__ = [
    "CAClassifier",
    "CAStream",
    "CastreamError",
    "Graph",
    "StageSpec",
    "StagedBackbone",
    "StreamConfig",
    "Tensor",
    "default_stage_specs",
]
