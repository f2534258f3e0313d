"""CubeMLP multimodal fusion in numpy with hand-written reverse passes."""

__version__ = "0.1.0"

from .layers import CubeMLPConfig, ParamStore, Tape, init_params, model_backward, model_forward, reference_config
from .tensor3 import Axis, Shape3, Tensor3

__all__ = [
    "Axis",
    "CubeMLPConfig",
    "ParamStore",
    "Shape3",
    "Tape",
    "Tensor3",
    "init_params",
    "model_backward",
    "model_forward",
    "reference_config",
]
