"""Landmark-guided Swin restoration network.

Layout: 3x3 shallow conv -> D residual Swin blocks (each L window-attention
layers + 3x3 conv + skip) -> 3x3 fusion conv + global skip -> channel
reduction, cascaded x2 pixel-shuffle stages, 3x3 RGB conv, plus a bicubic
upsample of the LR image.
"""
from __future__ import annotations

import math
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import bicubic_resample
from .heatmaps import ModelInput

MASK_VALUE = -100.0

_DEBUG = os.environ.get("SWINIFS_DEBUG", "") not in ("", "0")


@contextmanager
def debug_mode(enabled: bool = True):
    """Enable finiteness assertions on every block output."""
    global _DEBUG
    prev, _DEBUG = _DEBUG, enabled
    try:
        yield
    finally:
        _DEBUG = prev


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if _DEBUG and not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite values after {where}")
    return x


@dataclass
class ModelConfig:
    in_channels: int = 8
    embed_dim: int = 96
    num_rstb: int = 6
    stl_per_rstb: int = 6
    num_heads: int = 6
    window_size: int = 8
    mlp_ratio: float = 2.0
    scale: int = 4
    drop_path: float = 0.0
    recon_channels: int = 64

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.window_size < 2:
            raise ValueError("window_size must be >= 2")
        if self.scale not in (4, 8):
            raise ValueError("scale must be 4 or 8")
        if self.num_rstb < 1 or self.stl_per_rstb < 1:
            raise ValueError("need at least one block and one layer per block")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# tensor plumbing
# --------------------------------------------------------------------------


def pad_to_window(x: torch.Tensor, m: int) -> tuple[torch.Tensor, tuple[int, int]]:
    """Replicate-pad a (B, C, H, W) tensor on the right/bottom to multiples of ``m``."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    return x, (h, w)


def unpad(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    h, w = size
    return x[..., :h, :w]


def window_partition(x: torch.Tensor, m: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * nW, m*m, C); windows and pixels both row-major."""
    b, h, w, c = x.shape
    if h % m or w % m:
        raise ValueError(f"feature map {h}x{w} is not a multiple of window size {m}; pad first")
    x = x.view(b, h // m, m, w // m, m, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, m * m, c)


def window_reverse(windows: torch.Tensor, m: int, h: int, w: int) -> torch.Tensor:
    """Inverse of :func:`window_partition`."""
    if h % m or w % m:
        raise ValueError(f"{h}x{w} is not a multiple of window size {m}")
    per_image = (h // m) * (w // m)
    if windows.shape[0] % per_image or windows.shape[1] != m * m:
        raise ValueError(f"window tensor {tuple(windows.shape)} inconsistent with {h}x{w}, m={m}")
    b = windows.shape[0] // per_image
    x = windows.reshape(b, h // m, w // m, m, m, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)


def cyclic_shift(x: torch.Tensor, shift: int) -> torch.Tensor:
    """Roll a (B, H, W, C) map up-left by ``shift``; ``cyclic_unshift`` undoes it."""
    return torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))


def cyclic_unshift(x: torch.Tensor, shift: int) -> torch.Tensor:
    return torch.roll(x, shifts=(shift, shift), dims=(1, 2))


def relative_position_index(m: int) -> torch.Tensor:
    """(m*m, m*m) table mapping a pixel pair to its offset bucket in [0, (2m-1)^2)."""
    coords = torch.stack(torch.meshgrid(torch.arange(m), torch.arange(m), indexing="ij")).flatten(1)
    rel = coords[:, :, None] - coords[:, None, :] + (m - 1)
    return rel[0] * (2 * m - 1) + rel[1]


def shifted_window_mask(h: int, w: int, m: int, shift: int) -> torch.Tensor:
    """(nW, m*m, m*m) additive mask: 0 within the same pre-shift region, MASK_VALUE across regions."""
    region = torch.zeros(1, h, w, 1)
    label = 0
    for hs in (slice(0, -m), slice(-m, -shift), slice(-shift, None)):
        for ws in (slice(0, -m), slice(-m, -shift), slice(-shift, None)):
            region[:, hs, ws, :] = label
            label += 1
    ids = window_partition(region, m).squeeze(-1)
    diff = ids[:, None, :] - ids[:, :, None]
    return torch.where(diff != 0, torch.tensor(MASK_VALUE), torch.tensor(0.0))


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    return F.pixel_shuffle(x, r)


def pixel_unshuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    return F.pixel_unshuffle(x, r)


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------


class DropPath(nn.Module):
    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if self.p == 0.0 or not self.training:
            return x
        keep = 1.0 - self.p
        mask = x.new_empty((x.shape[0],) + (1,) * (x.ndim - 1)).bernoulli_(keep)
        return x * mask / keep


class WindowAttention(nn.Module):
    """Multi-head self-attention inside one window with a learned relative-position bias."""

    def __init__(self, dim: int, window_size: int, num_heads: int):
        super().__init__()
        self.dim = dim
        self.window_size = window_size
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * window_size - 1) ** 2, num_heads))
        self.register_buffer("relative_position_index", relative_position_index(window_size), persistent=False)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)

    def position_bias(self) -> torch.Tensor:
        n = self.window_size ** 2
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)]
        return bias.view(n, n, self.num_heads).permute(2, 0, 1)

    def attention_weights(self, x: torch.Tensor, mask: torch.Tensor | None = None):
        """Return (softmax weights (B_, heads, N, N), values (B_, heads, N, d))."""
        b_, n, c = x.shape
        qkv = self.qkv(x).reshape(b_, n, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = (q * self.scale) @ k.transpose(-2, -1) + self.position_bias().unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            logits = logits.view(b_ // nw, nw, self.num_heads, n, n) + mask.to(logits.dtype)[None, :, None]
            logits = logits.view(b_, self.num_heads, n, n)
        return logits.softmax(dim=-1), v

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """x: (B*nW, m*m, C); mask: optional (nW, m*m, m*m)."""
        _check_finite(x, "window attention input")
        attn, v = self.attention_weights(x, mask)
        out = (attn @ v).transpose(1, 2).reshape(x.shape)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class SwinLayer(nn.Module):
    """Pre-norm window attention + MLP; odd layers use shifted windows."""

    def __init__(self, dim: int, num_heads: int, window_size: int, layer_index: int,
                 mlp_ratio: float = 2.0, drop_path: float = 0.0):
        super().__init__()
        self.window_size = window_size
        self.shift = window_size // 2 if layer_index % 2 == 1 else 0
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window_size, num_heads)
        self.drop_path = DropPath(drop_path)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self._masks: dict[tuple[int, int, torch.device], torch.Tensor] = {}

    def mask_for(self, h: int, w: int, device) -> torch.Tensor | None:
        if not self.shift:
            return None
        key = (h, w, torch.device(device))
        if key not in self._masks:
            self._masks[key] = shifted_window_mask(h, w, self.window_size, self.shift).to(device)
        return self._masks[key]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, H, W, C) with H, W multiples of the window size."""
        b, h, w, c = x.shape
        m = self.window_size
        y = self.norm1(x)
        if self.shift:
            y = cyclic_shift(y, self.shift)
        y = self.attn(window_partition(y, m), self.mask_for(h, w, x.device))
        y = window_reverse(y, m, h, w)
        if self.shift:
            y = cyclic_unshift(y, self.shift)
        x = x + self.drop_path(y)
        x = x + self.drop_path(self.mlp(self.norm2(x)))
        return _check_finite(x, "swin layer")


class RSTB(nn.Module):
    """L Swin layers, a 3x3 conv, and a residual connection to the block input."""

    def __init__(self, dim: int, depth: int, num_heads: int, window_size: int,
                 mlp_ratio: float = 2.0, drop_path=0.0):
        super().__init__()
        dps = drop_path if isinstance(drop_path, (list, tuple)) else [drop_path] * depth
        self.layers = nn.ModuleList(
            SwinLayer(dim, num_heads, window_size, j, mlp_ratio, dps[j]) for j in range(depth)
        )
        self.conv = nn.Conv2d(dim, dim, 3, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, C, H, W)."""
        y = x.permute(0, 2, 3, 1)
        for layer in self.layers:
            y = layer(y)
        y = self.conv(y.permute(0, 3, 1, 2).contiguous())
        return _check_finite(y + x, "residual swin block")


class SwinIFS(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        c, rc = cfg.embed_dim, cfg.recon_channels

        self.conv_first = nn.Conv2d(cfg.in_channels, c, 3, 1, 1)

        total = cfg.num_rstb * cfg.stl_per_rstb
        dpr = [cfg.drop_path * i / max(total - 1, 1) for i in range(total)]
        self.blocks = nn.ModuleList(
            RSTB(c, cfg.stl_per_rstb, cfg.num_heads, cfg.window_size, cfg.mlp_ratio,
                 dpr[i * cfg.stl_per_rstb:(i + 1) * cfg.stl_per_rstb])
            for i in range(cfg.num_rstb)
        )
        self.conv_after_body = nn.Conv2d(c, c, 3, 1, 1)

        self.conv_reduce = nn.Conv2d(c, rc, 3, 1, 1)
        stages = []
        for _ in range(int(math.log2(cfg.scale))):
            stages += [nn.Conv2d(rc, 4 * rc, 3, 1, 1), nn.PixelShuffle(2)]
        self.upsample = nn.Sequential(*stages)
        self.conv_last = nn.Conv2d(rc, 3, 3, 1, 1)

        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(m):
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)

    # stages -------------------------------------------------------------

    def shallow_extract(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, got {x.shape[1]}")
        return _check_finite(self.conv_first(x), "shallow extraction")

    def deep_extract(self, f0: torch.Tensor) -> torch.Tensor:
        f = f0
        for block in self.blocks:
            f = block(f)
        return _check_finite(f0 + self.conv_after_body(f), "deep extraction")

    def reconstruct(self, f_res: torch.Tensor, lr_image: torch.Tensor) -> torch.Tensor:
        s = self.config.scale
        h, w = lr_image.shape[-2:]
        x = self.conv_last(self.upsample(self.conv_reduce(f_res)))
        return x + bicubic_resample(lr_image, s * h, s * w)

    def forward(self, x) -> torch.Tensor:
        """(B, 8, H, W) or (8, H, W) -> (B, 3, sH, sW); output is not clamped."""
        if isinstance(x, ModelInput):
            if x.scale != self.config.scale:
                raise ValueError(f"input built for scale {x.scale}, model is x{self.config.scale}")
            x = x.tensor
        squeeze = x.ndim == 3
        if squeeze:
            x = x.unsqueeze(0)
        lr = x[:, :3]
        padded, size = pad_to_window(x, self.config.window_size)
        f_res = unpad(self.deep_extract(self.shallow_extract(padded)), size)
        out = self.reconstruct(f_res, lr)
        return out.squeeze(0) if squeeze else out

    def zero_head(self) -> "SwinIFS":
        """Zero the final RGB conv so the network reduces to its bicubic skip."""
        with torch.no_grad():
            self.conv_last.weight.zero_()
            self.conv_last.bias.zero_()
        return self


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
