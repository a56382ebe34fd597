"""Two-view pretext augmentation and downstream transforms.

The pretext chain runs in a fixed order: resize, horizontal flip, vertical
flip, rotation, grayscale, Gaussian blur. The rotation angle is drawn
uniformly from ``rotation_range`` on every call. Exposed corners are filled by
reflection unless ``rotation_fill="zero"``. Blur sigma is drawn uniformly from
``blur_sigma_range`` and applied with a normalised separable kernel of
``blur_kernel`` taps.

Every call derives its randomness from ``(rng_seed, source_index)``, so a
sample's views are reproducible regardless of worker or batch order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
from PIL import Image
from scipy import ndimage

from ._util import make_rng
from .data_ingest import ImageSample

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass(frozen=True)
class AugmentationConfig:
    resize: tuple[int, int] = (224, 224)
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    rotation_range: tuple[float, float] = (-90.0, 90.0)
    grayscale_p: float = 0.2
    blur_p: float = 0.51
    blur_kernel: int = 21
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    rotation_fill: str = "reflect"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown augmentation keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("resize", "rotation_range", "blur_sigma_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ViewPair:
    view_a: np.ndarray  # C x H x W float32 in [0, 1]
    view_b: np.ndarray
    source_index: int


def validate_config(cfg: AugmentationConfig) -> list[str]:
    problems = []
    for name in ("hflip_p", "vflip_p", "grayscale_p", "blur_p"):
        p = getattr(cfg, name)
        if not (0.0 <= p <= 1.0):
            problems.append(f"{name}: probability out of range")
    if cfg.blur_kernel % 2 == 0:
        problems.append("blur_kernel must be odd")
    if cfg.blur_kernel < 3:
        problems.append("blur_kernel must be >= 3")
    lo, hi = cfg.rotation_range
    if lo > hi:
        problems.append("rotation_range: low must not exceed high")
    slo, shi = cfg.blur_sigma_range
    if not (0 < slo <= shi):
        problems.append("blur_sigma_range must satisfy 0 < low <= high")
    if len(cfg.resize) != 2 or min(cfg.resize) < 1:
        problems.append("resize must be two positive integers")
    if cfg.rotation_fill not in ("reflect", "zero"):
        problems.append("rotation_fill must be 'reflect' or 'zero'")
    return problems


# ---------------------------------------------------------------------------
# primitive ops on H x W x 3 float32 arrays


def resize(pixels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a uint8 image, returned as float32 in [0, 1]."""
    h, w = size
    if pixels.shape[:2] != (h, w):
        pixels = np.asarray(Image.fromarray(pixels).resize((w, h), Image.BILINEAR))
    return pixels.astype(np.float32) / 255.0


def rotate(img: np.ndarray, angle: float, fill: str = "reflect") -> np.ndarray:
    if angle == 0:
        return img
    mode = "reflect" if fill == "reflect" else "constant"
    out = ndimage.rotate(img, angle, axes=(1, 0), reshape=False, order=1, mode=mode, cval=0.0)
    return np.clip(out, 0.0, 1.0)


def to_grayscale(img: np.ndarray) -> np.ndarray:
    y = img @ LUMA
    return np.repeat(y[..., None], 3, axis=2)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, size: int, sigma: float) -> np.ndarray:
    k = gaussian_kernel(size, sigma)
    out = ndimage.convolve1d(img, k, axis=0, mode="reflect")
    return ndimage.convolve1d(out, k, axis=1, mode="reflect")


def to_chw(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.clip(img, 0.0, 1.0).transpose(2, 0, 1), dtype=np.float32)


# ---------------------------------------------------------------------------


def _augment_once(pixels: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    # every draw happens unconditionally so the stream layout is config-independent
    u = rng.random(4)
    angle = rng.uniform(*cfg.rotation_range) if cfg.rotation_range[1] > cfg.rotation_range[0] else cfg.rotation_range[0]
    sigma = rng.uniform(*cfg.blur_sigma_range)

    img = resize(pixels, cfg.resize)
    if u[0] < cfg.hflip_p:
        img = img[:, ::-1]
    if u[1] < cfg.vflip_p:
        img = img[::-1, :]
    img = rotate(np.ascontiguousarray(img), float(angle), cfg.rotation_fill)
    if u[2] < cfg.grayscale_p:
        img = to_grayscale(img)
    if u[3] < cfg.blur_p:
        img = gaussian_blur(img, cfg.blur_kernel, float(sigma))
    return to_chw(img)


def pretext_views(sample: ImageSample, cfg: AugmentationConfig, rng_seed: int, source_index: int = 0) -> ViewPair:
    """Two independently augmented views of one image."""
    rng_a = make_rng(rng_seed, source_index, "view", 0)
    rng_b = make_rng(rng_seed, source_index, "view", 1)
    return ViewPair(
        view_a=_augment_once(sample.pixels, cfg, rng_a),
        view_b=_augment_once(sample.pixels, cfg, rng_b),
        source_index=source_index,
    )


def downstream_transform(sample: ImageSample, train_mode: bool, rng_seed: int = 0, size: int = 224,
                         source_index: int = 0) -> np.ndarray:
    """Resize to ``size``; in train mode, reflect-pad by ``size // 8`` and crop back at random.

    Small inputs are upscaled by the resize, so any image of at least 32 px works.
    """
    img = resize(sample.pixels, (size, size))
    if train_mode:
        pad = max(1, size // 8)
        padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
        rng = make_rng(rng_seed, source_index, "crop")
        top, left = rng.integers(0, 2 * pad + 1, size=2)
        img = padded[top:top + size, left:left + size]
    return to_chw(img)


def channel_stats(images) -> tuple[list[float], list[float]]:
    """Per-channel mean and std over an iterable of C x H x W arrays."""
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for x in images:
        x = np.asarray(x, dtype=np.float64).reshape(3, -1)
        total += x.sum(axis=1)
        total_sq += (x * x).sum(axis=1)
        count += x.shape[1]
    if count == 0:
        raise ValueError("no images to compute statistics from")
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean**2, 1e-12))
    return mean.tolist(), std.tolist()
