"""Pixel, perceptual, and combined training objectives."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ExtractorError(RuntimeError):
    pass


@dataclass
class LossWeights:
    lambda_l1: float = 1.0
    lambda_perc: float = 0.1

    def __post_init__(self):
        if self.lambda_l1 < 0 or self.lambda_perc < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossConfig:
    lambda_l1: float = 1.0
    lambda_perc: float = 0.1
    extractor: str = "vgg19"
    extractor_layers: list[str] = field(default_factory=lambda: ["relu4_4"])

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_l1, self.lambda_perc)


class FeatureExtractor(nn.Module):
    """Frozen image -> list-of-features map.

    Inputs are [0, 1] images; ``normalize`` maps them to the statistics the
    network was trained on before ``features`` runs.
    """

    identifier = "base"
    mean: tuple[float, ...] = (0.0, 0.0, 0.0)
    std: tuple[float, ...] = (1.0, 1.0, 1.0)

    def freeze(self):
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        mean = torch.tensor(self.mean, dtype=x.dtype, device=x.device).view(1, -1, 1, 1)
        std = torch.tensor(self.std, dtype=x.dtype, device=x.device).view(1, -1, 1, 1)
        return (x - mean) / std

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return self.features(self.normalize(x))


class IdentityExtractor(FeatureExtractor):
    identifier = "identity"

    def features(self, x):
        return [x]


class RandomConvExtractor(FeatureExtractor):
    """Small fixed-seed conv stack for hermetic tests.

    Uses tanh so the map stays smooth, which keeps finite-difference checks clean.
    """

    identifier = "random_test"
    mean = (0.5, 0.5, 0.5)
    std = (0.5, 0.5, 0.5)

    def __init__(self, channels=(8, 16), seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        cin = 3
        for cout in channels:
            conv = nn.Conv2d(cin, cout, 3, 1, 1)
            bound = (1.0 / (cin * 9)) ** 0.5
            with torch.no_grad():
                conv.weight.copy_((torch.rand(conv.weight.shape, generator=gen) * 2 - 1) * bound * 3 ** 0.5)
                conv.bias.copy_((torch.rand(conv.bias.shape, generator=gen) * 2 - 1) * 0.1)
            convs.append(conv)
            cin = cout
        self.convs = nn.ModuleList(convs)
        self.freeze()

    def features(self, x):
        feats = []
        for i, conv in enumerate(self.convs):
            x = torch.tanh(conv(x))
            feats.append(x)
            if i + 1 < len(self.convs):
                x = F.avg_pool2d(x, 2)
        return feats


# torchvision vgg19().features indices of every post-activation output
VGG19_LAYERS = {
    "relu1_1": 1, "relu1_2": 3,
    "relu2_1": 6, "relu2_2": 8,
    "relu3_1": 11, "relu3_2": 13, "relu3_3": 15, "relu3_4": 17,
    "relu4_1": 20, "relu4_2": 22, "relu4_3": 24, "relu4_4": 26,
    "relu5_1": 29, "relu5_2": 31, "relu5_3": 33, "relu5_4": 35,
}


class VGG19Extractor(FeatureExtractor):
    """ImageNet VGG-19 taps (default relu4_4).

    ``weights_path`` may point at a torchvision ``vgg19`` state dict; otherwise
    the torchvision pretrained weights are fetched through its cache.
    """

    identifier = "vgg19"
    mean = IMAGENET_MEAN
    std = IMAGENET_STD

    def __init__(self, layers=("relu4_4",), weights_path=None):
        super().__init__()
        from torchvision.models import VGG19_Weights, vgg19

        unknown = [name for name in layers if name not in VGG19_LAYERS]
        if unknown:
            raise ValueError(f"unknown VGG-19 layers {unknown}")
        try:
            if weights_path is not None:
                net = vgg19()
                net.load_state_dict(torch.load(Path(weights_path), map_location="cpu"))
            else:
                net = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
        except Exception as exc:  # network or file failures
            raise ExtractorError(f"[{self.identifier}] could not load pretrained weights: {exc}") from exc
        self.taps = sorted(VGG19_LAYERS[name] for name in layers)
        self.body = net.features[: self.taps[-1] + 1]
        self.freeze()

    def features(self, x):
        feats = []
        for i, layer in enumerate(self.body):
            x = layer(x)
            if i in self.taps:
                feats.append(x)
        return feats


def build_extractor(name: str, layers=None, weights_path=None) -> FeatureExtractor:
    if name == "vgg19":
        return VGG19Extractor(tuple(layers or ("relu4_4",)), weights_path)
    if name == "random_test":
        return RandomConvExtractor()
    if name == "identity":
        return IdentityExtractor()
    raise ValueError(f"unknown extractor {name!r}")


def _check_shapes(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_shapes(pred, target)
    return (pred - target).abs().mean()


def perceptual_loss(pred: torch.Tensor, target: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    """Mean squared feature difference, averaged over the extractor's taps."""
    _check_shapes(pred, target)
    if pred.ndim == 3:
        pred, target = pred.unsqueeze(0), target.unsqueeze(0)
    try:
        fp = extractor(pred)
        with torch.no_grad():
            ft = extractor(target)
    except Exception as exc:
        raise ExtractorError(f"[{getattr(extractor, 'identifier', type(extractor).__name__)}] {exc}") from exc
    terms = [F.mse_loss(a, b) for a, b in zip(fp, ft)]
    return torch.stack(terms).mean()


def total_loss(pred, target, extractor: FeatureExtractor | None, w: LossWeights):
    """Weighted sum plus a float breakdown for logging.

    The breakdown holds the raw terms (``l1``, ``perc``), the weighted terms
    (``w_l1``, ``w_perc``), and ``total``.

    The perceptual term is skipped (and reported as 0) when its weight is zero.
    """
    l1 = l1_loss(pred, target)
    if w.lambda_perc > 0:
        if extractor is None:
            raise ValueError("a feature extractor is required when lambda_perc > 0")
        perc = perceptual_loss(pred, target, extractor)
    else:
        perc = torch.zeros((), dtype=pred.dtype, device=pred.device)
    total = w.lambda_l1 * l1 + w.lambda_perc * perc
    l1_v, perc_v = l1.item(), perc.item()
    breakdown = {
        "l1": l1_v,
        "perc": perc_v,
        "w_l1": w.lambda_l1 * l1_v,
        "w_perc": w.lambda_perc * perc_v,
        "total": total.item(),
    }
    return total, breakdown
