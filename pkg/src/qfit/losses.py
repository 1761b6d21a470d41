"""Differentiable image losses: Gaussian-windowed SSIM and mean absolute error.

SSIM is computed on the valid region only (windows fully inside the image),
so border pixels never see zero padding and the constant-image closed form
holds exactly. The loss is 1 - mean(SSIM), which lives in [0, 2].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian tap matrix (sums to 1)."""
    if size < 3 or size % 2 == 0:
        raise ConfigError(f"window size must be odd and >= 3, got {size}")
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    half = size // 2
    coords = np.arange(size) - half
    g1 = np.exp(-coords ** 2 / (2.0 * sigma ** 2))
    g = np.outer(g1, g1)
    return g / g.sum()


@dataclass(frozen=True)
class SsimConfig:
    dynamic_range: float
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        gaussian_window(self.window_size, self.sigma)  # validates size/sigma
        if self.dynamic_range <= 0:
            raise ConfigError(
                f"dynamic_range must be positive, got {self.dynamic_range}")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ConfigError("stability constants k1, k2 must be positive")

    @classmethod
    def from_stack(cls, stack, **kw) -> "SsimConfig":
        """Dynamic range taken as the maximum of the reference stack."""
        data = stack.data if isinstance(stack, Tensor) else np.asarray(stack)
        peak = float(data.max())
        if peak <= 0:
            raise ConfigError("reference stack maximum must be positive")
        return cls(dynamic_range=peak, **kw)

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def _filter_planes(x: Tensor, taps: Tensor, n: int, c: int, h: int, w: int,
                   size: int) -> Tensor:
    """Gaussian-filter every (n, c) plane and crop to the valid region."""
    flat = ad.reshape(x, (n * c, 1, h, w))
    filt = ad.conv2d(flat, taps, ad.Tensor(np.zeros(1)))
    m = size // 2
    filt = ad.narrow(filt, 2, m, h - 2 * m)
    filt = ad.narrow(filt, 3, m, w - 2 * m)
    return ad.reshape(filt, (n, c, h - 2 * m, w - 2 * m))


def ssim_map(a: Tensor, b: Tensor, config: SsimConfig) -> Tensor:
    """Per-pixel SSIM over the valid region, shape (N, C, H-2m, W-2m)."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim operands differ in shape: {a.shape} vs {b.shape}")
    if a.ndim != 4:
        raise ShapeError(f"ssim expects (N, C, H, W), got {a.shape}")
    n, c, h, w = a.shape
    size = config.window_size
    if h < size or w < size:
        raise ShapeError(
            f"image {h}x{w} smaller than the {size}x{size} ssim window")

    taps = ad.Tensor(gaussian_window(size, config.sigma)[None, None])

    def filt(t: Tensor) -> Tensor:
        return _filter_planes(t, taps, n, c, h, w, size)

    mu_a = filt(a)
    mu_b = filt(b)
    e_aa = filt(ad.mul(a, a))
    e_bb = filt(ad.mul(b, b))
    e_ab = filt(ad.mul(a, b))
    var_a = ad.sub(e_aa, ad.mul(mu_a, mu_a))
    var_b = ad.sub(e_bb, ad.mul(mu_b, mu_b))
    cov = ad.sub(e_ab, ad.mul(mu_a, mu_b))

    c1, c2 = config.c1, config.c2
    num = ad.mul(ad.add(ad.mul(2.0, ad.mul(mu_a, mu_b)), c1),
                 ad.add(ad.mul(2.0, cov), c2))
    den = ad.mul(ad.add(ad.add(ad.mul(mu_a, mu_a), ad.mul(mu_b, mu_b)), c1),
                 ad.add(ad.add(var_a, var_b), c2))
    return ad.div(num, den)


def ssim_loss(a: Tensor, b: Tensor, config: SsimConfig) -> Tensor:
    """1 - mean SSIM; 0 for identical images, at most 2."""
    return ad.sub(1.0, ad.reduce_mean(ssim_map(a, b, config)))


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference over all elements."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1 operands differ in shape: {a.shape} vs {b.shape}")
    return ad.reduce_abs_mean(ad.sub(a, b))
