"""Stochastic two-view generation for small RGB images.

Five transform families run in a fixed order, each gated by its own
probability draw: resized crop, horizontal flip, color jitter, grayscale,
Gaussian blur. Images are ``(H, W, 3)`` float arrays in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError
from .numerics import TRAIN_DTYPE, Rng

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale_range: tuple[float, float] = (0.08, 1.0)
    crop_ratio_range: tuple[float, float] = (3 / 4, 4 / 3)
    crop_prob: float = 1.0
    flip_prob: float = 0.5
    jitter_strength: float = 0.5
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    output_size: tuple[int, int] = (32, 32)

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise ParameterError(f"crop_scale_range must satisfy 0 < low <= high <= 1, got {self.crop_scale_range}")
        rlo, rhi = self.crop_ratio_range
        if not 0 < rlo <= rhi:
            raise ParameterError(f"bad crop_ratio_range {self.crop_ratio_range}")
        for name in ("crop_prob", "flip_prob", "jitter_prob", "grayscale_prob", "blur_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ParameterError(f"{name} must be in [0, 1], got {p}")
        if self.jitter_strength < 0:
            raise ParameterError("jitter_strength must be >= 0")
        slo, shi = self.blur_sigma_range
        if not 0 < slo <= shi:
            raise ParameterError(f"bad blur_sigma_range {self.blur_sigma_range}")
        if min(self.output_size) < 1:
            raise ParameterError(f"bad output_size {self.output_size}")

    @classmethod
    def identity(cls, size: tuple[int, int]) -> "AugmentConfig":
        """Config under which :func:`sample_view` returns its input unchanged."""
        return cls(
            crop_scale_range=(1.0, 1.0), crop_ratio_range=(1.0, 1.0),
            flip_prob=0.0, jitter_prob=0.0, grayscale_prob=0.0, blur_prob=0.0, output_size=size,
        )


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers and edge clamping."""
    H, W = img.shape[:2]
    if (H, W) == (out_h, out_w):
        return img.copy()

    def coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = coords(H, out_h)
    x0, x1, fx = coords(W, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def crop_window(H: int, W: int, cfg: AugmentConfig, rng: Rng) -> tuple[int, int, int, int]:
    """Random ``(top, left, height, width)`` window; full image after 10 failed draws."""
    area = H * W
    log_lo, log_hi = math.log(cfg.crop_ratio_range[0]), math.log(cfg.crop_ratio_range[1])
    for _ in range(10):
        target = area * rng.uniform(*cfg.crop_scale_range)
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= W and 0 < h <= H:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            return top, left, h, w
    return 0, 0, H, W


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1, :].copy()


def to_grayscale(img: np.ndarray) -> np.ndarray:
    y = img @ LUMA
    return np.repeat(y[..., None], 3, axis=2)


def adjust_brightness(img: np.ndarray, f: float) -> np.ndarray:
    return np.clip(img * f, 0.0, 1.0)


def adjust_contrast(img: np.ndarray, f: float) -> np.ndarray:
    mean = float(np.mean(img @ LUMA))
    return np.clip(mean + f * (img - mean), 0.0, 1.0)


def adjust_saturation(img: np.ndarray, f: float) -> np.ndarray:
    y = (img @ LUMA)[..., None]
    return np.clip(y + f * (img - y), 0.0, 1.0)


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    maxc = img.max(axis=-1)
    minc = img.min(axis=-1)
    v = maxc
    delta = maxc - minc
    safe_max = np.where(maxc > 0, maxc, 1.0)
    s = np.where(maxc > 0, delta / safe_max, 0.0)
    safe_d = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe_d
    gc = (maxc - g) / safe_d
    bc = (maxc - b) / safe_d
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    choices = [
        np.stack([v, t, p], -1), np.stack([q, v, p], -1), np.stack([p, v, t], -1),
        np.stack([p, q, v], -1), np.stack([t, p, v], -1), np.stack([v, p, q], -1),
    ]
    out = np.zeros_like(hsv)
    for k, c in enumerate(choices):
        out = np.where((i == k)[..., None], c, out)
    return out


def adjust_hue(img: np.ndarray, shift: float) -> np.ndarray:
    hsv = rgb_to_hsv(img)
    hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


def color_jitter(img: np.ndarray, strength: float, rng: Rng) -> np.ndarray:
    """Brightness, contrast, saturation and hue in a random order."""
    b = c = s = 0.8 * strength
    hue = 0.2 * strength
    factors = [
        rng.uniform(max(0.0, 1 - b), 1 + b),
        rng.uniform(max(0.0, 1 - c), 1 + c),
        rng.uniform(max(0.0, 1 - s), 1 + s),
        rng.uniform(-hue, hue),
    ]
    ops = [adjust_brightness, adjust_contrast, adjust_saturation, adjust_hue]
    for k in rng.permutation(4):
        img = ops[k](img, factors[k])
    return img


def blur_kernel_radius(h: int, w: int) -> int:
    """Kernel size is 10% of the short side rounded up, bumped to odd."""
    size = math.ceil(0.1 * min(h, w))
    if size % 2 == 0:
        size += 1
    return size // 2


def gaussian_blur(img: np.ndarray, sigma: float, radius: int) -> np.ndarray:
    if radius == 0:
        return img.copy()
    t = np.arange(-radius, radius + 1, dtype=TRAIN_DTYPE)
    k = np.exp(-(t * t) / (2.0 * sigma * sigma))
    k /= k.sum()
    H, W = img.shape[:2]
    mode = "reflect" if min(H, W) > radius else "edge"
    padded = np.pad(img, ((radius, radius), (0, 0), (0, 0)), mode=mode)
    out = sum(k[i] * padded[i : i + H] for i in range(2 * radius + 1))
    padded = np.pad(out, ((0, 0), (radius, radius), (0, 0)), mode=mode)
    out = sum(k[i] * padded[:, i : i + W] for i in range(2 * radius + 1))
    return np.clip(out, 0.0, 1.0)


def sample_view(img: np.ndarray, cfg: AugmentConfig, rng: Rng) -> np.ndarray:
    """One random view of ``img``; fully determined by (img, cfg, rng stream)."""
    img = np.asarray(img, dtype=TRAIN_DTYPE)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"image must be (H, W, 3), got {img.shape}")
    H, W = img.shape[:2]
    if H < 4 or W < 4:
        raise DimensionError(f"image must be at least 4x4, got {H}x{W}")
    out_h, out_w = cfg.output_size

    if rng.random() < cfg.crop_prob:
        top, left, h, w = crop_window(H, W, cfg, rng)
        img = img[top : top + h, left : left + w]
    img = np.clip(resize_bilinear(img, out_h, out_w), 0.0, 1.0)

    if rng.random() < cfg.flip_prob:
        img = hflip(img)
    if rng.random() < cfg.jitter_prob:
        img = color_jitter(img, cfg.jitter_strength, rng)
    if rng.random() < cfg.grayscale_prob:
        img = np.clip(to_grayscale(img), 0.0, 1.0)
    if rng.random() < cfg.blur_prob:
        sigma = rng.uniform(*cfg.blur_sigma_range)
        img = gaussian_blur(img, sigma, blur_kernel_radius(out_h, out_w))
    return img


def make_view_pair(img: np.ndarray, cfg: AugmentConfig, rng_a: Rng, rng_b: Rng) -> tuple[np.ndarray, np.ndarray]:
    return sample_view(img, cfg, rng_a), sample_view(img, cfg, rng_b)
