"""Full-reference image quality metrics and evaluation reports."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .losses import IMAGENET_MEAN, IMAGENET_STD, ExtractorError, FeatureExtractor, RandomConvExtractor

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
Y_WEIGHTS = (0.299, 0.587, 0.114)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _check(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def rgb_to_y(image: torch.Tensor) -> torch.Tensor:
    """BT.601 full-range luma of a (..., 3, H, W) image; keeps a singleton channel axis."""
    r, g, b = image.unbind(dim=-3)
    y = Y_WEIGHTS[0] * r + Y_WEIGHTS[1] * g + Y_WEIGHTS[2] * b
    return y.unsqueeze(-3)


def psnr(pred: torch.Tensor, target: torch.Tensor) -> float:
    """RGB PSNR in dB on [0, 1]-clamped inputs; identical images give PSNR_CAP."""
    _check(pred, target)
    p = pred.detach().double().clamp(0, 1)
    t = target.detach().double().clamp(0, 1)
    mse = float(((p - t) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(ax ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_y(pred: torch.Tensor, target: torch.Tensor) -> float:
    """Single-scale SSIM on the Y channel, mean over valid (unpadded) window positions."""
    _check(pred, target)
    if min(pred.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"image {tuple(pred.shape[-2:])} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    x = rgb_to_y(pred.detach().double().clamp(0, 1)).reshape(-1, 1, *pred.shape[-2:])
    y = rgb_to_y(target.detach().double().clamp(0, 1)).reshape(-1, 1, *target.shape[-2:])
    win = gaussian_window().view(1, 1, SSIM_WINDOW, SSIM_WINDOW)
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2

    mu_x, mu_y = F.conv2d(x, win), F.conv2d(y, win)
    sxx = F.conv2d(x * x, win) - mu_x ** 2
    syy = F.conv2d(y * y, win) - mu_y ** 2
    sxy = F.conv2d(x * y, win) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float((num / den).mean())


# --------------------------------------------------------------------------
# learned perceptual distance
# --------------------------------------------------------------------------


class AlexNetTaps(FeatureExtractor):
    identifier = "alexnet"
    mean = IMAGENET_MEAN
    std = IMAGENET_STD
    taps = (1, 4, 7, 9, 11)

    def __init__(self, weights_path=None):
        super().__init__()
        from torchvision.models import AlexNet_Weights, alexnet

        try:
            if weights_path is not None:
                net = alexnet()
                net.load_state_dict(torch.load(weights_path, map_location="cpu"))
            else:
                net = alexnet(weights=AlexNet_Weights.IMAGENET1K_V1)
        except Exception as exc:
            raise ExtractorError(f"[alexnet] could not load pretrained weights: {exc}") from exc
        self.body = net.features[: self.taps[-1] + 1]
        self.freeze()

    def features(self, x):
        out = []
        for i, layer in enumerate(self.body):
            x = layer(x)
            if i in self.taps:
                out.append(x)
        return out


def _published_lpips_weights(name: str):
    """Linear-layer weights shipped with the ``lpips`` package, if it is installed."""
    try:
        import lpips  # noqa: F401
    except ImportError:
        return None
    path = Path(lpips.__file__).parent / "weights" / "v0.1" / f"{name}.pth"
    if not path.exists():
        return None
    state = torch.load(path, map_location="cpu")
    keys = sorted(k for k in state if k.endswith("weight"))
    return [state[k].reshape(-1) for k in keys]


class PerceptualDistance(nn.Module):
    """LPIPS-style distance over a pluggable feature network.

    Each tap is unit-normalized across channels, the squared difference is
    weighted per channel, summed over channels, averaged spatially, and the
    per-tap values are summed.
    """

    def __init__(self, net: FeatureExtractor, channel_weights: Sequence[torch.Tensor] | None = None,
                 identifier: str | None = None):
        super().__init__()
        self.net = net
        self.identifier = identifier or net.identifier
        self._weights = None if channel_weights is None else [w.detach().clone() for w in channel_weights]

    def channel_weights(self, feats):
        if self._weights is None:
            self._weights = [torch.full((f.shape[1],), 1.0 / f.shape[1]) for f in feats]
        return self._weights

    @staticmethod
    def unit_normalize(f: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
        norm = torch.sqrt((f ** 2).sum(dim=1, keepdim=True))
        return f / (norm + eps)

    def forward(self, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        if pred.ndim == 3:
            pred, target = pred.unsqueeze(0), target.unsqueeze(0)
        fp, ft = self.net(pred), self.net(target)
        total = 0.0
        for a, b, w in zip(fp, ft, self.channel_weights(fp)):
            d = (self.unit_normalize(a) - self.unit_normalize(b)) ** 2
            w = w.to(d.dtype).view(1, -1, 1, 1)
            total = total + (d * w).sum(dim=1).mean(dim=(1, 2))
        return total


def build_metric_net(name: str = "alexnet", weights_path=None) -> PerceptualDistance:
    """``alexnet`` with the published linear weights when both are loadable, else ``random_test``."""
    if name == "alexnet":
        lin = _published_lpips_weights("alex")
        try:
            backbone = AlexNetTaps(weights_path)
        except ExtractorError as exc:
            log.warning("%s; falling back to the random_test metric net", exc)
        else:
            if lin is not None:
                return PerceptualDistance(backbone, lin, identifier="alexnet+lpips_v0.1")
            log.warning("lpips linear weights unavailable; using uniform channel weights")
            return PerceptualDistance(backbone, identifier="alexnet+uniform")
    elif name != "random_test":
        raise ValueError(f"unknown metric net {name!r}")
    return PerceptualDistance(RandomConvExtractor(channels=(8, 16, 16), seed=1), identifier="random_test")


def perceptual_distance(pred: torch.Tensor, target: torch.Tensor, metric_net: PerceptualDistance) -> float:
    _check(pred, target)
    with torch.no_grad():
        p = pred.detach().clamp(0, 1)
        t = target.detach().clamp(0, 1)
        param = next(metric_net.parameters(), None)
        if param is not None:
            p, t = p.to(param.dtype), t.to(param.dtype)
        d = metric_net(p, t)
    return float(d.mean())


# --------------------------------------------------------------------------
# timing
# --------------------------------------------------------------------------


def timed_inference(model: Callable, inputs, repeats: int = 20, warmup: int = 3):
    """Run ``model(inputs)`` ``warmup + repeats`` times at batch 1.

    Returns the last output and the median wall-clock seconds of the timed runs.
    Timings are only meaningful when nothing else is loading the machine.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    out = None
    with torch.no_grad():
        for _ in range(warmup):
            out = model(inputs)
        samples = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            out = model(inputs)
            samples.append(time.perf_counter() - t0)
    timed_inference.last_samples = samples
    return out, statistics.median(samples)


timed_inference.last_samples = []


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

METRIC_CONVENTIONS = {
    "psnr": "RGB, clamp [0,1], no border crop, cap 100 dB",
    "ssim": "Y (BT.601), gaussian 11x11 sigma 1.5, K=(0.01,0.03), valid positions",
    "timing": "median wall-clock, batch 1, exclusive machine",
}


@dataclass
class ImageScores:
    image_id: str
    psnr: float
    ssim: float
    perceptual_distance: float
    inference_seconds: float
    bicubic_psnr: float = float("nan")
    bicubic_ssim: float = float("nan")
    bicubic_perceptual_distance: float = float("nan")


@dataclass
class EvalReport:
    per_image: list[ImageScores]
    scale: int = 4
    model_name: str = "SwinIFS"
    fingerprint: dict = field(default_factory=dict)

    COLUMNS = ("psnr", "ssim", "perceptual_distance", "inference_seconds",
               "bicubic_psnr", "bicubic_ssim", "bicubic_perceptual_distance")

    @property
    def aggregates(self) -> dict[str, float]:
        if not self.per_image:
            return {c: float("nan") for c in self.COLUMNS}
        n = len(self.per_image)
        return {c: sum(getattr(r, c) for r in self.per_image) / n for c in self.COLUMNS}

    def fingerprint_hash(self) -> str:
        blob = json.dumps(self.fingerprint, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(("image_id",) + self.COLUMNS)
            for r in self.per_image:
                writer.writerow([r.image_id] + [f"{getattr(r, c):.6f}" for c in self.COLUMNS])
            agg = self.aggregates
            writer.writerow(["mean"] + [f"{agg[c]:.6f}" for c in self.COLUMNS])

    def table(self) -> str:
        """Text table with one column group per scale, as in the usual face-SR comparison layout."""
        agg = self.aggregates
        head = f"{self.scale}x Upscaling"
        lines = [
            f"{'':<12}| {head:^26}",
            f"{'Model':<12}| {'PSNR':>7} {'SSIM':>8} {'LPIPS':>8}",
            "-" * 40,
            f"{'Bicubic':<12}| {agg['bicubic_psnr']:7.2f} {agg['bicubic_ssim']:8.4f} "
            f"{agg['bicubic_perceptual_distance']:8.4f}",
            f"{self.model_name:<12}| {agg['psnr']:7.2f} {agg['ssim']:8.4f} {agg['perceptual_distance']:8.4f}",
            "",
            f"images: {len(self.per_image)}  mean inference: {agg['inference_seconds'] * 1e3:.2f} ms/image",
            f"fingerprint: {self.fingerprint_hash()}",
        ]
        lines += [f"  {k}: {v}" for k, v in sorted(self.fingerprint.items())]
        return "\n".join(lines)

    def write(self, out_path) -> tuple[Path, Path]:
        """Write ``<out>.txt`` (table) and ``<out>.csv``; returns both paths."""
        out = Path(out_path)
        out.parent.mkdir(parents=True, exist_ok=True)
        base = out.with_suffix("") if out.suffix in (".txt", ".csv") else out
        txt, csv_path = base.with_suffix(".txt"), base.with_suffix(".csv")
        txt.write_text(self.table() + "\n", encoding="utf-8")
        self.write_csv(csv_path)
        return txt, csv_path
