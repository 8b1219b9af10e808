"""Dynamic human Gaussian splatting anchored in several reference frames.

Each human Gaussian is stored once per reference frame. A neural field maps a
Gaussian and a query time to per-frame offsets plus blend weights, and the
weighted sum of the deformed copies is rendered by a differentiable splatting
rasterizer. The static background is a separate, undeformed Gaussian set.
"""

from .scene import Camera, DataError, FramePriors, Gaussians, GaussianFrameSet, PriorBundle
from .rasterizer import RenderOutput, render_gaussians
from .deform_net import EncodingConfig, init_params
from .deform_field import deform_at
from .shape_init import InitConfig, initialize, select_reference_frames
from .trainer import NumericalFailure, TrainConfig, train
from .synth import SynthConfig, generate

__all__ = [
    "Camera", "DataError", "FramePriors", "Gaussians", "GaussianFrameSet", "PriorBundle",
    "RenderOutput", "render_gaussians", "EncodingConfig", "init_params", "deform_at",
    "InitConfig", "initialize", "select_reference_frames",
    "NumericalFailure", "TrainConfig", "train", "SynthConfig", "generate",
]
__version__ = "0.1.0"
