"""Synthetic benchmark generator: segmentable blob scenes, ground-truth
smooth warps, and controllable noise.

Noise is added independently to moving and fixed AFTER warping, so the
ground-truth field exactly aligns the underlying structures while the noise
itself is unalignable by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import DisplacementField, Image, LabelMap, Rng
from .warp import warp_image, warp_labels


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    num_blobs: int = 5
    radius_min: float = 4.0
    radius_max: float = 8.0
    intensity_min: float = 0.5
    intensity_max: float = 1.0
    num_classes: int = 4  # background + blob classes
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.height % 4 or self.width % 4:
            raise ValueError("grid must be divisible by 4")
        if self.radius_max >= min(self.height, self.width) / 2:
            raise ValueError("blob radius does not fit in the grid")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.num_classes < 2:
            raise ValueError("need background plus at least one blob class")


@dataclass(frozen=True)
class WarpSpec:
    amplitude: float = 4.0
    smoothness_sigma: float = 18.0
    seed: int = 0

    def __post_init__(self):
        if self.amplitude < 0 or self.smoothness_sigma <= 0:
            raise ValueError("invalid warp spec")


def _scene_noiseless(spec: SceneSpec, rng: Rng):
    h, w = spec.height, spec.width
    image = np.zeros((h, w))
    labels = np.zeros((h, w), dtype=np.int64)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    n_fg = spec.num_classes - 1
    for _ in range(spec.num_blobs):
        r = spec.radius_min + rng.uniform(1)[0] * (spec.radius_max - spec.radius_min)
        margin = r + 1.0
        cy = margin + rng.uniform(1)[0] * (h - 1 - 2 * margin)
        cx = margin + rng.uniform(1)[0] * (w - 1 - 2 * margin)
        cls = 1 + int(rng.integers(0, n_fg, 1)[0])
        # evenly spaced intensity level per class
        frac = (cls - 1) / max(n_fg - 1, 1)
        peak = spec.intensity_min + frac * (spec.intensity_max - spec.intensity_min)
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        inside = d < r
        # smooth radial bump, zero at the support boundary
        profile = peak * np.cos(np.pi * d / (2.0 * r)) ** 2
        image[inside] = profile[inside]
        labels[inside] = cls
    return image, labels


def gen_scene(spec: SceneSpec, index: int):
    """Deterministic scene for (spec.seed, index); returns (Image, LabelMap)."""
    rng = Rng(spec.seed).split(index)
    image, labels = _scene_noiseless(spec, rng)
    if spec.noise_sigma > 0:
        noise = rng.normal(image.size).reshape(image.shape)
        image = image + spec.noise_sigma * noise
    return Image(image), LabelMap(labels, spec.num_classes)


def random_smooth_field(height: int, width: int, spec: WarpSpec) -> DisplacementField:
    """Blurred white noise, rescaled so max |component| equals the amplitude."""
    rng = Rng(spec.seed)
    u = rng.normal(height * width * 2).reshape(height, width, 2)
    for c in range(2):
        u[:, :, c] = gaussian_filter(u[:, :, c], spec.smoothness_sigma,
                                     mode="reflect", truncate=3.0)
    peak = np.abs(u).max()
    if spec.amplitude == 0.0 or peak == 0.0:
        return DisplacementField(np.zeros((height, width, 2)))
    return DisplacementField(u * (spec.amplitude / peak))


def make_pair(spec: SceneSpec, warp_spec: WarpSpec, index: int):
    """One registration pair with ground truth.

    Returns (moving, moving_labels, fixed, fixed_labels, truth), where
    warp(moving, truth) reproduces the noiseless fixed image exactly:
    moving is the clean scene and fixed is that scene resampled through
    truth. Independent noise is then added to each image.
    """
    rng = Rng(spec.seed).split(index)
    clean, labels = _scene_noiseless(spec, rng)
    moving_img = Image(clean)
    moving_labels = LabelMap(labels, spec.num_classes)
    truth = random_smooth_field(spec.height, spec.width,
                                WarpSpec(warp_spec.amplitude,
                                         warp_spec.smoothness_sigma,
                                         Rng(warp_spec.seed).split(index).seed))
    fixed_img = warp_image(moving_img, truth)
    fixed_labels = warp_labels(moving_labels, truth)
    if spec.noise_sigma > 0:
        nm = rng.normal(clean.size).reshape(clean.shape)
        nf = rng.normal(clean.size).reshape(clean.shape)
        moving_img = Image(moving_img.plane(0) + spec.noise_sigma * nm)
        fixed_img = Image(fixed_img.plane(0) + spec.noise_sigma * nf)
    return moving_img, moving_labels, fixed_img, fixed_labels, truth
