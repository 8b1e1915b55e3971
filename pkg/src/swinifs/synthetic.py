"""Procedural face-like images with known landmarks, for tests and desk-scale runs.

These are stand-ins for CelebA: smooth skin ellipse, eyes, nose, mouth, hair
and some fine texture so that a 4x/8x bicubic round trip loses real detail.
"""
from __future__ import annotations

import numpy as np
import torch

from .data import LandmarkSet


def _ellipse(xx, yy, cx, cy, rx, ry, soft=1.0):
    d = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
    return np.clip((1.0 - d) * min(rx, ry) / soft + 0.5, 0.0, 1.0)


def synthetic_face(rng: np.random.Generator, height: int = 128, width: int = 128,
                   texture: float = 0.03) -> tuple[torch.Tensor, LandmarkSet]:
    """Return a 3xHxW float32 image in [0, 1] and its five landmarks."""
    s = min(height, width) / 128.0
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    cx = width / 2 + rng.uniform(-4, 4) * s
    cy = height / 2 + rng.uniform(-4, 4) * s

    bg = rng.uniform(0.1, 0.9, size=3)
    bg_grad = rng.uniform(-0.2, 0.2, size=3)
    img = bg[:, None, None] + bg_grad[:, None, None] * (yy / height - 0.5)[None]

    skin = np.array([rng.uniform(0.55, 0.9), rng.uniform(0.4, 0.7), rng.uniform(0.3, 0.6)])
    hair = rng.uniform(0.02, 0.4) * np.ones(3) + rng.uniform(0, 0.15, size=3)
    frx, fry = rng.uniform(36, 44) * s, rng.uniform(46, 54) * s

    hair_m = _ellipse(xx, yy, cx, cy - 8 * s, frx + 6 * s, fry + 4 * s, soft=1.5)
    img = img * (1 - hair_m) + hair[:, None, None] * hair_m
    face_m = _ellipse(xx, yy, cx, cy + 4 * s, frx, fry, soft=1.5)
    shade = 1.0 - 0.15 * ((xx - cx) / (frx + 1e-9)) ** 2
    img = img * (1 - face_m) + (skin[:, None, None] * shade[None]) * face_m

    eye_dx = rng.uniform(14, 18) * s
    eye_y = cy - rng.uniform(6, 10) * s
    le, re = (cx - eye_dx, eye_y), (cx + eye_dx, eye_y)
    iris = rng.uniform(0.05, 0.45, size=3)
    for ex, ey in (le, re):
        white = _ellipse(xx, yy, ex, ey, 6.5 * s, 3.2 * s, soft=0.7)
        img = img * (1 - white) + 0.92 * white
        pupil = _ellipse(xx, yy, ex, ey, 2.6 * s, 2.6 * s, soft=0.5)
        img = img * (1 - pupil) + iris[:, None, None] * pupil
        brow = _ellipse(xx, yy, ex, ey - 7 * s, 8 * s, 1.4 * s, soft=0.6)
        img = img * (1 - brow) + hair[:, None, None] * brow

    nose = (cx + rng.uniform(-1.5, 1.5) * s, cy + rng.uniform(6, 10) * s)
    nostril = _ellipse(xx, yy, nose[0], nose[1] + 1.5 * s, 4.5 * s, 1.8 * s, soft=0.8)
    img = img * (1 - 0.5 * nostril[None])

    mouth_y = cy + rng.uniform(20, 24) * s
    mouth_w = rng.uniform(9, 13) * s
    ml, mr = (cx - mouth_w, mouth_y), (cx + mouth_w, mouth_y)
    lips = _ellipse(xx, yy, cx, mouth_y, mouth_w, 2.6 * s, soft=0.7)
    lip_col = np.array([rng.uniform(0.5, 0.8), 0.2, 0.25])
    img = img * (1 - lips) + lip_col[:, None, None] * lips
    gap = _ellipse(xx, yy, cx, mouth_y, mouth_w * 0.9, 0.6 * s, soft=0.4)
    img = img * (1 - 0.7 * gap[None])

    # fine texture: the part a bicubic round trip cannot recover
    noise = rng.standard_normal((height, width))
    noise = (noise + np.roll(noise, 1, 0) + np.roll(noise, 1, 1)) / 3.0
    img = img + texture * noise[None] * (0.5 + 0.5 * face_m[None])

    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    lms = LandmarkSet.from_flat([le[0], le[1], re[0], re[1], nose[0], nose[1], ml[0], ml[1], mr[0], mr[1]])
    return torch.from_numpy(img), lms


def synthetic_faces(n: int, seed: int = 0, height: int = 128, width: int = 128, texture: float = 0.03):
    rng = np.random.default_rng(seed)
    return [synthetic_face(rng, height, width, texture) for _ in range(n)]


def write_synthetic_source(out_dir, n: int, seed: int = 0, height: int = 218, width: int = 178,
                           texture: float = 0.03):
    """Write ``n`` CelebA-shaped source images plus a landmark list; returns (images_dir, landmarks_path)."""
    from pathlib import Path

    from .data import save_image

    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    lines = [str(n), "lefteye_x lefteye_y righteye_x righteye_y nose_x nose_y leftmouth_x leftmouth_y rightmouth_x rightmouth_y"]
    for i, (img, lms) in enumerate(synthetic_faces(n, seed, height, width, texture)):
        name = f"{i + 1:06d}.png"
        save_image(img, img_dir / name)
        lines.append(name + " " + " ".join(f"{v:.3f}" for v in lms.flat()))
    lm_path = out_dir / "list_landmarks.txt"
    lm_path.write_text("\n".join(lines) + "\n")
    return img_dir, lm_path
