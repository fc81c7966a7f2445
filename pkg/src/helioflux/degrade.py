"""Training-time domain randomization of dataset samples.

Nine transforms: observation dropout, heliostat/sun position jitter,
surface-label noise, and six flux-image transforms (overexposure clamping,
background noise, contrast, edge crop-rescale, smooth deformation,
bilinear smoothing). Each applies independently with a configurable
probability; pixel transforms re-normalize so the peak stays 1. The same
transforms double as the synthetic "measured data" stand-in when judging
robustness of trained models.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.ndimage import convolve1d

from .datagen import DatasetSample, Observation
from .geometry import MAX_CONTROL_Z_MM, FacetSurface, HeliostatSurface, SunState, normalize
from .optics import FluxImage


@dataclass(frozen=True)
class RandomizationConfig:
    """Enable flags and magnitudes of the randomization transforms."""

    apply_prob: float = 0.5

    dropout: bool = True
    position_jitter: bool = True
    pos_jitter_sigma_m: float = 0.05
    sun_jitter_sigma_deg: float = 0.1
    surface_noise: bool = True
    surface_noise_sigma_mm: float = 0.02

    clamp: bool = True
    clamp_range: tuple = (0.9, 1.0)
    background: bool = True
    background_noise_max: float = 0.02
    contrast: bool = True
    contrast_gamma_range: tuple = (0.8, 1.25)
    crop: bool = True
    deform: bool = True
    deform_amp_px: float = 0.5
    smooth: bool = True
    smooth_kernel_px: int = 2

    def __post_init__(self):
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ValueError("apply_prob must lie in [0, 1]")
        for name in ("pos_jitter_sigma_m", "sun_jitter_sigma_deg", "surface_noise_sigma_mm",
                     "background_noise_max", "deform_amp_px"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        for key in ("clamp_range", "contrast_gamma_range"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)

    @classmethod
    def disabled(cls):
        return cls(apply_prob=0.0)


def _renormalize(img):
    peak = img.max()
    return img / peak if peak > 0 else img


def clamp_overexpose(img, rng, clamp_range=(0.9, 1.0)):
    """Clamp at a threshold drawn from ``clamp_range``, then rescale to peak 1."""
    t = rng.uniform(*clamp_range)
    if t >= 1.0:
        return img.copy()
    return np.minimum(img, t) / t


def background_noise(img, rng, max_level=0.02):
    """Add i.i.d. uniform background up to a random level, re-normalize."""
    level = rng.uniform(0.0, max_level)
    if level <= 0.0:
        return img.copy()
    return _renormalize(img + rng.uniform(0.0, level, size=img.shape))


def adjust_contrast(img, rng, gamma_range=(0.8, 1.25)):
    """Apply a random power-law to pixel values; the peak stays 1."""
    gamma = rng.uniform(*gamma_range)
    if gamma == 1.0:
        return img.copy()
    return np.power(img, gamma)


def _bilinear_sample(img, y, x):
    ny, nx = img.shape
    x0 = np.clip(np.floor(x).astype(np.int64), 0, nx - 1)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, ny - 1)
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    fx = np.clip(x - x0, 0.0, 1.0)
    fy = np.clip(y - y0, 0.0, 1.0)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _bilinear_resize(img, shape):
    ny, nx = shape
    sy = img.shape[0] / ny
    sx = img.shape[1] / nx
    ys = (np.arange(ny) + 0.5) * sy - 0.5
    xs = (np.arange(nx) + 0.5) * sx - 0.5
    yg, xg = np.meshgrid(ys, xs, indexing="ij")
    return _bilinear_sample(img, yg, xg)


def crop_rescale(img, rng):
    """Crop one pixel from a random nonempty subset of edges, resample back.

    Edges are (left, right, bottom, top), each cropped at most once; the
    cropped grid is bilinearly resampled to the original shape and
    re-normalized.
    """
    subset = int(rng.integers(1, 16))
    left = subset & 1
    right = (subset >> 1) & 1
    bottom = (subset >> 2) & 1
    top = (subset >> 3) & 1
    ny, nx = img.shape
    cropped = img[bottom : ny - top, left : nx - right]
    return _renormalize(_bilinear_resize(cropped, img.shape))


def deform_flux(img, rng, amp=0.5):
    """Warp by a smooth random displacement field of at most ``amp`` pixels.

    The field is coarse uniform noise (4x4 per axis) bilinearly upsampled to
    the image grid, so displacements vary slowly across the image.
    """
    if amp <= 0.0:
        return img.copy()
    coarse = rng.uniform(-amp, amp, size=(2, 4, 4))
    dy = _bilinear_resize(coarse[0], img.shape)
    dx = _bilinear_resize(coarse[1], img.shape)
    ny, nx = img.shape
    yg, xg = np.meshgrid(np.arange(ny, dtype=float), np.arange(nx, dtype=float), indexing="ij")
    return _renormalize(_bilinear_sample(img, yg - dy, xg - dx))


def smooth_flux(img, kernel_px=2):
    """Separable triangular blur of half-width ``kernel_px``; peak back to 1.

    kernel_px = 1 is the identity; kernel_px = 2 uses weights (1, 2, 1)/4
    along each axis.
    """
    k = int(kernel_px)
    if k <= 1:
        return img.copy()
    taps = np.array([float(k - abs(i)) for i in range(-(k - 1), k)])
    taps /= taps.sum()
    out = convolve1d(img, taps, axis=0, mode="constant", cval=0.0)
    out = convolve1d(out, taps, axis=1, mode="constant", cval=0.0)
    return _renormalize(out)


def _jitter_direction(direction, sigma_deg, rng):
    # Small Gaussian angular perturbation, kept unit length.
    sigma = math.radians(sigma_deg)
    perturbed = direction + rng.normal(0.0, sigma, size=3)
    return normalize(perturbed)


def _apply_image_transforms(grid, config, rng):
    p = config.apply_prob
    if config.clamp and rng.random() < p:
        grid = clamp_overexpose(grid, rng, config.clamp_range)
    if config.background and rng.random() < p:
        grid = background_noise(grid, rng, config.background_noise_max)
    if config.contrast and rng.random() < p:
        grid = adjust_contrast(grid, rng, config.contrast_gamma_range)
    if config.crop and rng.random() < p:
        grid = crop_rescale(grid, rng)
    if config.deform and rng.random() < p:
        grid = deform_flux(grid, rng, config.deform_amp_px)
    if config.smooth and rng.random() < p:
        grid = smooth_flux(grid, config.smooth_kernel_px)
    return _renormalize(grid)


def randomize_sample(sample, config, rng):
    """Apply the full randomization pass to one dataset sample.

    Order: observation dropout, then metadata jitter (heliostat position,
    sun directions, surface-label noise), then the pixel transforms per
    surviving flux image. At least one observation always survives, and
    flux geometry metadata is never altered.

    Args:
        sample: DatasetSample.
        config: RandomizationConfig.
        rng: numpy Generator (explicit for determinism).

    Returns:
        A new DatasetSample; the input is left untouched.
    """
    p = config.apply_prob
    observations = list(sample.observations)

    if config.dropout and p > 0 and len(observations) > 1:
        drop = rng.random(len(observations)) < p
        if drop.all():
            keep_one = int(rng.integers(len(observations)))
            drop[keep_one] = False
        observations = [obs for obs, d in zip(observations, drop) if not d]

    heliostat = sample.heliostat
    if config.position_jitter and rng.random() < p:
        shifted = heliostat.position + rng.normal(0.0, config.pos_jitter_sigma_m, size=3)
        heliostat = replace(heliostat, position=shifted)

    truth = sample.truth
    if config.surface_noise and rng.random() < p:
        noisy = truth.as_array() + rng.normal(0.0, config.surface_noise_sigma_mm,
                                              size=(len(truth.facets), 8, 8))
        truth = HeliostatSurface.from_array(np.clip(noisy, -MAX_CONTROL_Z_MM, MAX_CONTROL_Z_MM))

    out = []
    for obs in observations:
        sun = obs.sun
        if config.position_jitter and rng.random() < p:
            sun = SunState(direction=_jitter_direction(sun.direction, config.sun_jitter_sigma_deg, rng),
                           csr=sun.csr)
        grid = obs.flux.normalized.astype(np.float64)
        grid = _apply_image_transforms(grid, config, rng)
        flux = FluxImage(raw=grid, geometry=obs.flux.geometry, ray_count=obs.flux.ray_count)
        out.append(Observation(sun=sun, aim=obs.aim, flux=flux))

    return DatasetSample(heliostat=heliostat, truth=truth, observations=tuple(out))
