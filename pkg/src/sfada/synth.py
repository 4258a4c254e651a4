"""Synthetic multi-domain segmentation data.

Each sample is a smooth textured background with one or more star-convex
"tumor" blobs. Geometry, texture and noise come from separate per-index
random streams, so masks do not depend on the domain style and samples can
be generated in any order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .data import Dataset, Sample

_GEOMETRY, _TEXTURE, _NOISE = 0, 1, 2
N_HARMONICS = 4
MAX_HARMONIC_AMPLITUDE = 0.3


@dataclass(frozen=True)
class DomainStyle:
    gain: float = 1.0
    bias: float = 0.0
    gamma: float = 1.0
    noise_sigma: float = 0.02
    blur_radius: int = 0
    texture_freq: float = 2.0

    def __post_init__(self):
        vals = (self.gain, self.bias, self.gamma, self.noise_sigma, self.blur_radius, self.texture_freq)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("style fields must be finite")
        if not 0.3 <= self.gamma <= 3.0:
            raise ValueError(f"gamma must lie in [0.3, 3], got {self.gamma}")
        if self.noise_sigma < 0 or self.blur_radius < 0:
            raise ValueError("noise_sigma and blur_radius must be non-negative")
        if self.texture_freq <= 0:
            raise ValueError("texture_freq must be positive")


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 100
    height: int = 64
    width: int = 64
    style: DomainStyle = field(default_factory=DomainStyle)
    seed: int = 0
    blob_count_range: tuple[int, int] = (1, 3)
    blob_radius_range: tuple[float, float] = (5.0, 11.0)
    name: str = "synth"

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        lo, hi = self.blob_count_range
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid blob_count_range {self.blob_count_range}")
        rlo, rhi = self.blob_radius_range
        if not 0 < rlo <= rhi < min(self.height, self.width) / 2:
            raise ValueError(f"invalid blob_radius_range {self.blob_radius_range}")


def _stream(cfg: SynthConfig, index: int, kind: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, index, kind])


def _blob_geometry(cfg: SynthConfig, index: int) -> list[tuple]:
    rng = _stream(cfg, index, _GEOMETRY)
    lo, hi = cfg.blob_count_range
    n_blobs = int(rng.integers(lo, hi + 1))
    blobs = []
    k = np.arange(1, N_HARMONICS + 1)
    for _ in range(n_blobs):
        r0 = rng.uniform(*cfg.blob_radius_range)
        # harmonic k is damped by 1/k so r(phi) stays above 0.375 * r0
        amps = rng.uniform(-MAX_HARMONIC_AMPLITUDE, MAX_HARMONIC_AMPLITUDE, N_HARMONICS) / k
        phases = rng.uniform(0, 2 * np.pi, N_HARMONICS)
        reach = r0 * (1 + np.abs(amps).sum())
        margin = min(reach, min(cfg.height, cfg.width) / 2 - 1)
        cy = rng.uniform(margin, cfg.height - 1 - margin)
        cx = rng.uniform(margin, cfg.width - 1 - margin)
        blobs.append((cy, cx, r0, amps, phases))
    return blobs


def blob_mask(cfg: SynthConfig, index: int) -> np.ndarray:
    """Exact union of blob interiors for sample ``index``."""
    yy, xx = np.mgrid[0 : cfg.height, 0 : cfg.width].astype(np.float64)
    mask = np.zeros((cfg.height, cfg.width), dtype=bool)
    k = np.arange(1, N_HARMONICS + 1)
    for cy, cx, r0, amps, phases in _blob_geometry(cfg, index):
        dy, dx = yy - cy, xx - cx
        phi = np.arctan2(dy, dx)
        radius = r0 * (1 + (amps[:, None, None] * np.cos(k[:, None, None] * phi + phases[:, None, None])).sum(0))
        mask |= np.hypot(dy, dx) <= radius
    return mask.astype(np.uint8)


def _smooth_field(rng: np.random.Generator, h: int, w: int, freq: float, n_waves: int = 4) -> np.ndarray:
    """Sum of random plane waves at ``freq`` cycles per image, scaled to [0, 1]."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    size = max(h, w)
    field_ = np.zeros((h, w))
    for _ in range(n_waves):
        theta = rng.uniform(0, np.pi)
        f = freq * rng.uniform(0.75, 1.25)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.cos(2 * np.pi * f * (np.cos(theta) * xx + np.sin(theta) * yy) / size + phase)
    return (field_ / n_waves + 1) / 2


def _base_image(cfg: SynthConfig, index: int, mask: np.ndarray) -> np.ndarray:
    rng = _stream(cfg, index, _TEXTURE)
    h, w = cfg.height, cfg.width
    background = 0.15 + 0.25 * _smooth_field(rng, h, w, cfg.style.texture_freq)
    tumor = 0.55 + 0.15 * _smooth_field(rng, h, w, 2 * cfg.style.texture_freq)
    return np.where(mask == 1, tumor, background)


def render_sample(cfg: SynthConfig, index: int) -> Sample:
    style = cfg.style
    mask = blob_mask(cfg, index)
    image = style.gain * _base_image(cfg, index, mask) ** style.gamma + style.bias
    if style.blur_radius > 0:
        image = ndimage.uniform_filter(image, size=2 * int(style.blur_radius) + 1, mode="nearest")
    if style.noise_sigma > 0:
        image = image + style.noise_sigma * _stream(cfg, index, _NOISE).standard_normal(image.shape)
    return Sample(f"{cfg.name}_{index:04d}", image, mask, cfg.name)


def generate_domain(cfg: SynthConfig) -> Dataset:
    return Dataset(tuple(render_sample(cfg, i) for i in range(cfg.n_samples)), cfg.name)


# Presets for the default three-domain benchmark. Intensities are normalized
# per image before training, so gain/bias alone would not shift the domain;
# the shift comes from contrast curve, blur, noise and texture scale.
SOURCE_STYLE = DomainStyle(gain=1.0, bias=0.0, gamma=1.0, noise_sigma=0.02, blur_radius=0, texture_freq=2.0)
TARGET_A_STYLE = DomainStyle(gain=0.8, bias=0.05, gamma=2.2, noise_sigma=0.06, blur_radius=1, texture_freq=4.0)
TARGET_B_STYLE = DomainStyle(gain=1.2, bias=-0.05, gamma=0.5, noise_sigma=0.04, blur_radius=0, texture_freq=6.0)

BENCHMARK_SIZES = {"source": 300, "targetA": 200, "targetB": 200}


def benchmark_configs(seed: int, size: int = 64) -> dict[str, SynthConfig]:
    styles = {"source": SOURCE_STYLE, "targetA": TARGET_A_STYLE, "targetB": TARGET_B_STYLE}
    return {
        name: SynthConfig(
            n_samples=BENCHMARK_SIZES[name], height=size, width=size, style=styles[name],
            seed=seed * 1000 + k, name=name,
        )
        for k, name in enumerate(styles)
    }


def default_benchmark(seed: int = 0, size: int = 64) -> tuple[Dataset, Dataset, Dataset]:
    cfgs = benchmark_configs(seed, size)
    return tuple(generate_domain(cfgs[name]) for name in ("source", "targetA", "targetB"))


def restyle(cfg: SynthConfig, style: DomainStyle) -> SynthConfig:
    return replace(cfg, style=style)
