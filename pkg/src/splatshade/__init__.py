"""Differentiable Gaussian splatting with prefiltered environment shading."""

from .envlight import EnvLight
from .rasterizer import RenderOutput, render, render_backward
from .scene import Camera, Gaussian, SplatScene, init_scene, load_checkpoint, save_checkpoint

__all__ = ["EnvLight", "Camera", "Gaussian", "SplatScene", "RenderOutput", "render", "render_backward",
           "init_scene", "load_checkpoint", "save_checkpoint"]
__version__ = "0.1.0"
