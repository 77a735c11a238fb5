"""xpd: a desk-scale lab for joint plane-instance segmentation and depth
estimation with cross-task feature distillation and depth-guided boundary
weighting, built on numpy with a small verified autodiff core.
"""

from . import autodiff, distill, losses, metrics, raster, scene
from .config import RunConfig
from .net import XPDNet, assemble_instances, xpdnet_forward
from .scene import CameraIntrinsics, PlanarScene, PlanePrimitive, SceneConfig

__all__ = [
    "autodiff", "distill", "losses", "metrics", "raster", "scene",
    "RunConfig", "XPDNet", "assemble_instances", "xpdnet_forward",
    "CameraIntrinsics", "PlanarScene", "PlanePrimitive", "SceneConfig",
]

__version__ = "0.1.0"
