"""Gaussian landmark heatmaps and the 8-channel network input."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import LandmarkSet

NUM_LANDMARKS = 5


@dataclass
class HeatmapConfig:
    sigma: float = 1.5
    truncation_radius_sigmas: float = 3.0


@dataclass
class HeatmapStack:
    maps: torch.Tensor  # 5 x H x W
    sigma: float


@dataclass
class ModelInput:
    tensor: torch.Tensor  # 8 x H x W
    scale: int

    def __post_init__(self):
        if self.tensor.shape[-3] != 3 + NUM_LANDMARKS:
            raise ValueError(f"model input needs 8 channels, got {self.tensor.shape[-3]}")


def render_heatmaps(landmarks_lr: LandmarkSet, h: int, w: int, sigma: float = 1.5,
                    truncation: float = 3.0, dtype=torch.float32) -> HeatmapStack:
    """Peak-normalized Gaussians evaluated at pixel centers ``(j + 0.5, i + 0.5)``.

    Values farther than ``truncation * sigma`` from the landmark are zero, and a
    landmark outside ``[0, w) x [0, h)`` yields an all-zero channel.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if h < 1 or w < 1:
        raise ValueError("heatmap size must be >= 1")
    ys = np.arange(h, dtype=np.float64)[:, None] + 0.5
    xs = np.arange(w, dtype=np.float64)[None, :] + 0.5
    radius2 = (truncation * sigma) ** 2
    maps = np.zeros((NUM_LANDMARKS, h, w), dtype=np.float64)
    for c, (px, py) in enumerate(landmarks_lr.points()):
        if not (0 <= px < w and 0 <= py < h):
            continue
        d2 = (xs - px) ** 2 + (ys - py) ** 2
        maps[c] = np.where(d2 <= radius2, np.exp(-d2 / (2.0 * sigma * sigma)), 0.0)
    return HeatmapStack(torch.from_numpy(maps).to(dtype), float(sigma))


def build_model_input(lr_image: torch.Tensor, heatmaps: HeatmapStack, scale: int = 4) -> ModelInput:
    if lr_image.shape[-3] != 3:
        raise ValueError("lr_image must have 3 channels")
    if lr_image.shape[-2:] != heatmaps.maps.shape[-2:]:
        raise ValueError(
            f"spatial size mismatch: image {tuple(lr_image.shape[-2:])} vs heatmaps {tuple(heatmaps.maps.shape[-2:])}"
        )
    maps = heatmaps.maps.to(dtype=lr_image.dtype, device=lr_image.device)
    return ModelInput(torch.cat([lr_image, maps], dim=-3), scale)
