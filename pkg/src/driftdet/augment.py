"""Weak and strong augmentation pipelines.

Weak augmentation may change geometry (horizontal flip, optional crop is off by
default); strong augmentation is purely photometric plus cutout, so boxes are
never touched by it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import AnnotatedImage, quantize8
from .errors import ConfigError


@dataclass(frozen=True)
class WeakAugConfig:
    flip_probability: float = 0.5
    crop_enabled: bool = False
    crop_fraction: float = 0.9

    def __post_init__(self):
        if not (0.0 <= self.flip_probability <= 1.0):
            raise ConfigError("flip_probability outside [0, 1]")
        if not (0.0 < self.crop_fraction <= 1.0):
            raise ConfigError("crop_fraction outside (0, 1]")


@dataclass(frozen=True)
class StrongAugConfig:
    jitter_magnitude: float = 0.4
    grayscale_probability: float = 0.2
    blur_probability: float = 0.3
    blur_sigma_min: float = 0.3
    blur_sigma_max: float = 1.2
    cutout_min: int = 1
    cutout_max: int = 3
    cutout_size_min: int = 4
    cutout_size_max: int = 12
    fill_value: float = 0.5

    def __post_init__(self):
        for p in (self.grayscale_probability, self.blur_probability):
            if not (0.0 <= p <= 1.0):
                raise ConfigError("probability outside [0, 1]")
        if self.jitter_magnitude < 0:
            raise ConfigError("jitter_magnitude must be >= 0")
        if self.cutout_max < self.cutout_min or self.cutout_min < 0:
            raise ConfigError("cutout count range is empty")
        if self.cutout_size_max < self.cutout_size_min or self.cutout_size_min < 1:
            raise ConfigError("cutout size range is empty")


def flip_boxes(annotations, width: float):
    return [(box.flipped(width), cls) for box, cls in annotations]


def weak_augment(img: AnnotatedImage, cfg: WeakAugConfig, seed: int):
    """Returns (augmented image, flipped flag); deterministic in seed."""
    rng = np.random.default_rng([abs(seed), 0x3EAF])
    flipped = bool(rng.random() < cfg.flip_probability)
    pixels = img.pixels
    annotations = list(img.annotations)
    masks = img.masks
    depth = img.depth
    if flipped:
        pixels = pixels[:, ::-1].copy()
        annotations = flip_boxes(annotations, img.width)
        if masks is not None:
            masks = [m[:, ::-1].copy() for m in masks]
        if depth is not None:
            depth = depth[:, ::-1].copy()
    if cfg.crop_enabled:
        size = img.height
        crop = max(8, int(round(cfg.crop_fraction * size)))
        y0 = int(rng.integers(0, size - crop + 1))
        x0 = int(rng.integers(0, size - crop + 1))
        pixels = pixels[y0:y0 + crop, x0:x0 + crop].copy()
        if depth is not None:
            depth = depth[y0:y0 + crop, x0:x0 + crop].copy()
        if masks is not None:
            masks = [m[y0:y0 + crop, x0:x0 + crop].copy() for m in masks]
        clipped = []
        for box, cls in annotations:
            x1 = min(max(box.x1 - x0, 0.0), crop)
            y1 = min(max(box.y1 - y0, 0.0), crop)
            x2 = min(max(box.x2 - x0, 0.0), crop)
            y2 = min(max(box.y2 - y0, 0.0), crop)
            if x2 - x1 >= 2 and y2 - y1 >= 2:
                from .data import BoundingBox

                clipped.append((BoundingBox(x1, y1, x2, y2), cls))
        annotations = clipped
    out = AnnotatedImage(pixels=pixels, annotations=annotations, domain=img.domain,
                         depth=depth, masks=masks)
    return out, flipped


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(pixels: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflective padding."""
    k = _gaussian_kernel(sigma)
    r = (len(k) - 1) // 2
    padded = np.pad(pixels, ((r, r), (0, 0), (0, 0)), mode="reflect")
    rows = sum(k[i] * padded[i:i + pixels.shape[0]] for i in range(len(k)))
    padded = np.pad(rows, ((0, 0), (r, r), (0, 0)), mode="reflect")
    return sum(k[i] * padded[:, i:i + pixels.shape[1]] for i in range(len(k)))


def strong_augment(img: AnnotatedImage, cfg: StrongAugConfig, seed: int) -> AnnotatedImage:
    """Photometric jitter + grayscale + blur + cutout; boxes are untouched."""
    rng = np.random.default_rng([abs(seed), 0x57F0])
    pixels = img.pixels.astype(np.float64)

    if cfg.jitter_magnitude > 0:
        m = cfg.jitter_magnitude
        brightness = rng.uniform(1 - m, 1 + m)
        contrast = rng.uniform(1 - m, 1 + m)
        saturation = rng.uniform(1 - m, 1 + m)
        pixels = pixels * brightness
        mean = pixels.mean()
        pixels = (pixels - mean) * contrast + mean
        gray = pixels.mean(axis=2, keepdims=True)
        pixels = (pixels - gray) * saturation + gray

    if rng.random() < cfg.grayscale_probability:
        pixels = np.repeat(pixels.mean(axis=2, keepdims=True), 3, axis=2)

    if rng.random() < cfg.blur_probability:
        sigma = rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max)
        pixels = gaussian_blur(pixels, sigma)

    pixels = np.clip(pixels, 0.0, 1.0)

    n_cut = int(rng.integers(cfg.cutout_min, cfg.cutout_max + 1)) if cfg.cutout_max > 0 else 0
    h, w = pixels.shape[:2]
    for _ in range(n_cut):
        ch = int(rng.integers(cfg.cutout_size_min, cfg.cutout_size_max + 1))
        cw = int(rng.integers(cfg.cutout_size_min, cfg.cutout_size_max + 1))
        ch, cw = min(ch, h), min(cw, w)
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        pixels[y0:y0 + ch, x0:x0 + cw] = cfg.fill_value

    return AnnotatedImage(pixels=pixels.astype(np.float32),
                          annotations=list(img.annotations), domain=img.domain,
                          depth=img.depth, masks=img.masks)


def identity_strong_config() -> StrongAugConfig:
    """All perturbations disabled; strong_augment becomes the identity."""
    return StrongAugConfig(jitter_magnitude=0.0, grayscale_probability=0.0,
                           blur_probability=0.0, cutout_min=0, cutout_max=0)
