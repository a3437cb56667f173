"""Desk-scale differentiable dynamic Gaussian splatting.

A canonical set of 3D Gaussians is deformed per frame by decoding
per-Gaussian latent embeddings together with coarse and fine temporal
embeddings, rendered with a tile-based differentiable rasterizer, and
trained end to end with hand-written reverse-mode gradients.
"""

from .gaussians import Camera, GaussianSet
from .rasterizer import RenderSettings, render, render_backward, brute_force_render

__all__ = [
    "Camera",
    "GaussianSet",
    "RenderSettings",
    "render",
    "render_backward",
    "brute_force_render",
]

__version__ = "0.1.0"
