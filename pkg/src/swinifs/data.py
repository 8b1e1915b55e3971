"""Face crops, the bicubic resampler, LR synthesis, and prepared-dataset manifests.

Coordinate convention used everywhere in the package: pixel ``i`` covers the
continuous interval ``[i, i + 1)`` and its center sits at ``i + 0.5``.  Under
this convention a rescale by ``s`` maps a coordinate ``x`` to ``x * s`` and a
crop at offset ``o`` maps it to ``x - o``, so landmark remapping is a plain
affine transform.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

HR_SIZE = 128
LANDMARK_NAMES = ("left_eye", "right_eye", "nose", "mouth_left", "mouth_right")


class AnnotationError(ValueError):
    """Raised for malformed landmark annotation or manifest files."""


class CropError(ValueError):
    pass


class Point(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class LandmarkSet:
    left_eye: Point
    right_eye: Point
    nose: Point
    mouth_left: Point
    mouth_right: Point

    @classmethod
    def from_flat(cls, values: Sequence[float]) -> "LandmarkSet":
        if len(values) != 10:
            raise ValueError(f"expected 10 coordinates, got {len(values)}")
        v = [float(a) for a in values]
        return cls(*(Point(v[2 * i], v[2 * i + 1]) for i in range(5)))

    @classmethod
    def from_array(cls, arr) -> "LandmarkSet":
        return cls.from_flat(np.asarray(arr, dtype=np.float64).reshape(-1).tolist())

    def points(self) -> list[Point]:
        return [self.left_eye, self.right_eye, self.nose, self.mouth_left, self.mouth_right]

    def as_array(self) -> np.ndarray:
        """(5, 2) float64 array of (x, y) rows in field order."""
        return np.array(self.points(), dtype=np.float64)

    def flat(self) -> list[float]:
        return [c for p in self.points() for c in p]

    def map(self, scale_x: float, scale_y: float, offset_x: float = 0.0, offset_y: float = 0.0) -> "LandmarkSet":
        """Apply ``p -> (p - offset) * scale`` to every point."""
        return LandmarkSet(
            *(Point((p.x - offset_x) * scale_x, (p.y - offset_y) * scale_y) for p in self.points())
        )


@dataclass
class ImageRecord:
    image_id: str
    hr_image: torch.Tensor  # 3 x 128 x 128, values in [0, 1]
    landmarks_hr: LandmarkSet

    def __post_init__(self):
        if self.hr_image.shape != (3, HR_SIZE, HR_SIZE):
            raise ValueError(f"hr_image must be 3x{HR_SIZE}x{HR_SIZE}, got {tuple(self.hr_image.shape)}")
        if self.hr_image.min() < 0 or self.hr_image.max() > 1:
            raise ValueError("hr_image values must lie in [0, 1]")


@dataclass(frozen=True)
class DegradationSpec:
    scale: int = 4
    blur_kernel: np.ndarray | None = None
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.scale not in (4, 8):
            raise ValueError(f"scale must be 4 or 8, got {self.scale}")
        if HR_SIZE % self.scale:
            raise ValueError("scale must divide the HR size")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.blur_kernel is not None:
            k = np.asarray(self.blur_kernel, dtype=np.float64)
            if k.ndim != 2:
                raise ValueError("blur_kernel must be 2-D")
            if abs(k.sum() - 1.0) > 1e-9:
                raise ValueError(f"blur_kernel must sum to 1, sums to {k.sum()!r}")


# --------------------------------------------------------------------------
# annotations
# --------------------------------------------------------------------------

_SPLIT = re.compile(r"[,\s]+")


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def load_landmark_annotations(path) -> list[tuple[str, LandmarkSet]]:
    """Read a CelebA-style landmark list: ``id x1 y1 ... x5 y5`` per line.

    Whitespace and commas both separate fields.  The CelebA header (a count
    line followed by a line of column names) is skipped if present.
    """
    out: list[tuple[str, LandmarkSet]] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            toks = [t for t in _SPLIT.split(line) if t]
            if not out and len(toks) == 1 and toks[0].isdigit():
                continue  # record count header
            if not out and len(toks) == 10 and not any(_is_number(t) for t in toks):
                continue  # column-name header
            if len(toks) != 11:
                raise AnnotationError(
                    f"{path}:{lineno}: expected id and 10 numbers, got {len(toks) - 1} fields"
                )
            image_id, nums = toks[0], toks[1:]
            try:
                values = [float(t) for t in nums]
            except ValueError as exc:
                raise AnnotationError(f"{path}:{lineno}: non-numeric coordinate ({exc})") from None
            if not all(math.isfinite(v) for v in values):
                raise AnnotationError(f"{path}:{lineno}: non-finite coordinate")
            if image_id in seen:
                raise AnnotationError(f"{path}:{lineno}: duplicate id {image_id!r}")
            seen.add(image_id)
            out.append((image_id, LandmarkSet.from_flat(values)))
    return out


# --------------------------------------------------------------------------
# bicubic resampling
# --------------------------------------------------------------------------

CUBIC_A = -0.5


def cubic_kernel(t: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    return np.where(
        t <= 1,
        (a + 2) * t3 - (a + 3) * t2 + 1,
        np.where(t < 2, a * t3 - 5 * a * t2 + 8 * a * t - 4 * a, 0.0),
    )


def resample_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Dense (out_size, in_size) bicubic interpolation matrix.

    The kernel is stretched by the scale factor when downscaling (antialias),
    taps outside the input are folded onto the nearest edge pixel, and every
    row is normalized to sum to one.
    """
    if in_size < 1 or out_size < 1:
        raise ValueError("sizes must be >= 1")
    scale = in_size / out_size
    support = 2.0 * max(scale, 1.0)
    stretch = max(scale, 1.0)
    mat = np.zeros((out_size, in_size), dtype=np.float64)
    for i in range(out_size):
        center = (i + 0.5) * scale
        lo = int(math.floor(center - support))
        hi = int(math.ceil(center + support))
        taps = np.arange(lo, hi + 1)
        w = cubic_kernel((taps + 0.5 - center) / stretch)
        np.add.at(mat[i], np.clip(taps, 0, in_size - 1), w)
        mat[i] /= mat[i].sum()
    return mat


_MATRIX_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _cached_matrix(in_size: int, out_size: int, like: torch.Tensor) -> torch.Tensor:
    key = (in_size, out_size)
    if key not in _MATRIX_CACHE:
        _MATRIX_CACHE[key] = resample_matrix(in_size, out_size)
    return torch.from_numpy(_MATRIX_CACHE[key]).to(dtype=like.dtype, device=like.device)


def bicubic_resample(image: torch.Tensor, target_h: int, target_w: int, clamp: bool = True) -> torch.Tensor:
    """Separable Catmull-Rom (a = -0.5) resize of a ``(..., H, W)`` tensor.

    Differentiable; output is clamped to [0, 1] unless ``clamp=False``.
    """
    if target_h < 1 or target_w < 1:
        raise ValueError("target sizes must be >= 1")
    h, w = image.shape[-2:]
    if not image.is_floating_point():
        image = image.float()
    out = image
    if (h, w) != (target_h, target_w):
        mh = _cached_matrix(h, target_h, image)
        mw = _cached_matrix(w, target_w, image)
        out = mh @ image @ mw.transpose(0, 1)
    if clamp:
        out = out.clamp(0.0, 1.0)
    return out


# --------------------------------------------------------------------------
# crop protocol
# --------------------------------------------------------------------------


def crop_face(image: torch.Tensor, landmarks: LandmarkSet, margin_frac: float = 0.5,
              image_id: str = "", size: int = HR_SIZE) -> ImageRecord:
    """Crop the landmark bounding box expanded by ``margin_frac`` per side and resize to ``size``.

    ``image`` is a 3xHxW tensor in [0, 1].  The crop is snapped outward to whole
    pixels and clamped to the source; with ``margin_frac=0`` it is the tightest
    pixel box containing every landmark.
    """
    if margin_frac < 0:
        raise CropError("margin_frac must be >= 0")
    _, src_h, src_w = image.shape
    pts = landmarks.as_array()
    if (pts[:, 0] < 0).any() or (pts[:, 0] >= src_w).any() or (pts[:, 1] < 0).any() or (pts[:, 1] >= src_h).any():
        raise CropError(f"landmarks outside the {src_w}x{src_h} source")
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    bw, bh = x1 - x0, y1 - y0
    if bw <= 0 or bh <= 0:
        raise CropError("degenerate landmark box (zero width or height)")

    left = max(0, int(math.floor(x0 - margin_frac * bw)))
    top = max(0, int(math.floor(y0 - margin_frac * bh)))
    right = min(src_w, int(math.floor(x1 + margin_frac * bw)) + 1)
    bottom = min(src_h, int(math.floor(y1 + margin_frac * bh)) + 1)

    crop = image[:, top:bottom, left:right]
    hr = bicubic_resample(crop, size, size)
    remapped = landmarks.map(size / (right - left), size / (bottom - top), left, top)
    return ImageRecord(image_id, hr, remapped)


# --------------------------------------------------------------------------
# degradation
# --------------------------------------------------------------------------


def blur(image: torch.Tensor, kernel: np.ndarray) -> torch.Tensor:
    """Same-size 2-D convolution of every channel with ``kernel``, edge-replicate boundary."""
    k = torch.as_tensor(np.asarray(kernel), dtype=image.dtype, device=image.device)
    kh, kw = k.shape
    # true convolution: flip the kernel for cross-correlation
    k = torch.flip(k, dims=(0, 1))
    c = image.shape[0]
    pad = ((kw - 1) // 2, kw // 2, (kh - 1) // 2, kh // 2)
    x = F.pad(image.unsqueeze(0), pad, mode="replicate")
    weight = k.expand(c, 1, kh, kw)
    return F.conv2d(x, weight, groups=c).squeeze(0)


def degrade(record: ImageRecord, spec: DegradationSpec, rng_seed: int = 0) -> tuple[torch.Tensor, LandmarkSet]:
    """Synthesize the LR observation: optional blur, bicubic /s, Gaussian noise, clamp."""
    x = record.hr_image
    if spec.blur_kernel is not None:
        x = blur(x, spec.blur_kernel)
    size = x.shape[-1] // spec.scale
    lr = bicubic_resample(x, size, size, clamp=False)
    if spec.noise_sigma > 0:
        gen = torch.Generator().manual_seed(int(rng_seed))
        noise = torch.randn(lr.shape, generator=gen, dtype=torch.float64).to(lr.dtype)
        lr = lr + spec.noise_sigma * noise
    lr = lr.clamp(0.0, 1.0)
    inv = 1.0 / spec.scale
    return lr, record.landmarks_hr.map(inv, inv)


def sample_seed(root_seed: int, index: int) -> int:
    """Per-sample noise seed derived from the root seed; stable across runs and workers."""
    return int(np.random.SeedSequence([int(root_seed), int(index)]).generate_state(1)[0])


# --------------------------------------------------------------------------
# image I/O
# --------------------------------------------------------------------------


def load_image(path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(tensor: torch.Tensor, path) -> None:
    arr = tensor.detach().clamp(0, 1).cpu().double().permute(1, 2, 0).numpy()
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


# --------------------------------------------------------------------------
# prepared-dataset manifest
# --------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    hr_path: Path
    lr_path: Path
    landmarks_lr: LandmarkSet
    scale: int

    @property
    def image_id(self) -> str:
        return self.hr_path.stem


def write_manifest(entries: Sequence[ManifestEntry], path) -> None:
    """One line per sample: ``hr_path lr_path x1 y1 ... x5 y5 scale``; paths relative to the manifest."""
    path = Path(path)
    root = path.parent.resolve()
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            hr = Path(e.hr_path).resolve()
            lr = Path(e.lr_path).resolve()
            try:
                hr, lr = hr.relative_to(root), lr.relative_to(root)
            except ValueError:
                pass
            coords = " ".join(f"{c:.6f}" for c in e.landmarks_lr.flat())
            fh.write(f"{hr.as_posix()} {lr.as_posix()} {coords} {e.scale}\n")


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    root = path.parent
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            toks = raw.split()
            if not toks or toks[0].startswith("#"):
                continue
            if len(toks) != 13:
                raise AnnotationError(f"{path}:{lineno}: expected 13 fields, got {len(toks)}")
            try:
                coords = [float(t) for t in toks[2:12]]
                scale = int(toks[12])
            except ValueError as exc:
                raise AnnotationError(f"{path}:{lineno}: {exc}") from None
            entries.append(ManifestEntry(root / toks[0], root / toks[1], LandmarkSet.from_flat(coords), scale))
    return entries


def iter_prepared(images_dir, annotations, out_dir, scale: int, margin_frac: float) -> Iterator[ManifestEntry]:
    """Crop, degrade, and write one HR/LR PNG pair per annotated image."""
    images_dir, out_dir = Path(images_dir), Path(out_dir)
    (out_dir / "hr").mkdir(parents=True, exist_ok=True)
    (out_dir / f"lr_x{scale}").mkdir(parents=True, exist_ok=True)
    spec = DegradationSpec(scale=scale)
    for image_id, lms in annotations:
        src = load_image(images_dir / image_id)
        rec = crop_face(src, lms, margin_frac, image_id=image_id)
        lr, lms_lr = degrade(rec, spec)
        stem = Path(image_id).stem
        hr_path = out_dir / "hr" / f"{stem}.png"
        lr_path = out_dir / f"lr_x{scale}" / f"{stem}.png"
        save_image(rec.hr_image, hr_path)
        save_image(lr, lr_path)
        yield ManifestEntry(hr_path, lr_path, lms_lr, scale)
