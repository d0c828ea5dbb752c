"""Learned per-pixel, per-channel adaptive kernels for supervised image downscaling."""

from .model import ModelConfig, build, forward
from .resample import apply_kernels, bicubic_upscale, classic_downscale

__version__ = "0.1.0"

__all__ = ["ModelConfig", "build", "forward", "apply_kernels", "classic_downscale", "bicubic_upscale"]
