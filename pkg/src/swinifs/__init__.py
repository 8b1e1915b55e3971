"""Landmark-guided Swin Transformer face super-resolution."""
from .data import DegradationSpec, ImageRecord, LandmarkSet, bicubic_resample, crop_face, degrade
from .heatmaps import HeatmapStack, ModelInput, build_model_input, render_heatmaps
from .model import ModelConfig, SwinIFS

__all__ = [
    "DegradationSpec", "ImageRecord", "LandmarkSet", "bicubic_resample", "crop_face", "degrade",
    "HeatmapStack", "ModelInput", "build_model_input", "render_heatmaps",
    "ModelConfig", "SwinIFS",
]
__version__ = "0.1.0"
