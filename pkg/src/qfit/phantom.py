"""Synthetic data: elliptical tissue phantoms, additive noise, and a
Cartesian retrospective-undersampling surrogate.

The phantom painter lays ellipses down in order (later regions overwrite
earlier ones) on a background of zeros, then modulates each parameter map
with a smooth random field so regions are not piecewise constant. The
undersampler keeps a fixed block of central phase-encode lines per frame
plus a random complement, mimicking an interleaved acquisition where each
time frame sees a different subset of k-space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError, ShapeError

CENTER_LINES = 8


@dataclass(frozen=True)
class EllipseRegion:
    """One tissue class painted as a rotated ellipse.

    ``center`` and ``axes`` are fractions of the image height/width, so the
    same spec scales to any grid size.
    """

    name: str
    center: tuple[float, float]   # (cy, cx) fractional
    axes: tuple[float, float]     # (ay, ax) fractional semi-axes
    angle_deg: float
    m0: float
    t1_ms: float
    t2_ms: float

    def __post_init__(self):
        if self.m0 < 0 or self.t1_ms <= 0 or self.t2_ms <= 0:
            raise ConfigError(f"region {self.name!r} has non-physical parameters")
        if self.t2_ms > self.t1_ms:
            raise ConfigError(f"region {self.name!r} violates t2 <= t1")
        if min(self.axes) <= 0:
            raise ConfigError(f"region {self.name!r} has non-positive axes")


@dataclass(frozen=True, eq=False)
class PhantomSpec:
    regions: tuple[EllipseRegion, ...]
    shape: tuple[int, int] = (64, 64)
    variation: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if len(self.regions) == 0:
            raise ConfigError("phantom needs at least one region")
        if self.shape[0] < 16 or self.shape[1] < 16:
            raise ConfigError(f"phantom shape too small: {self.shape}")
        if not (0.0 <= self.variation < 0.5):
            raise ConfigError(
                f"variation must lie in [0, 0.5), got {self.variation}")


@dataclass(eq=False)
class PhantomMaps:
    m0: np.ndarray
    t1_ms: np.ndarray
    t2_ms: np.ndarray
    mask: np.ndarray     # bool, True inside any region
    labels: np.ndarray   # region index per voxel, -1 for background
    spec: PhantomSpec


def _ellipse_mask(shape: tuple[int, int], region: EllipseRegion) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = region.center[0] * h, region.center[1] * w
    ay, ax = region.axes[0] * h, region.axes[1] * w
    th = np.radians(region.angle_deg)
    u = (xx - cx) * np.cos(th) + (yy - cy) * np.sin(th)
    v = -(xx - cx) * np.sin(th) + (yy - cy) * np.cos(th)
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def make_phantom(spec: PhantomSpec) -> PhantomMaps:
    """Paint regions in order and modulate with smooth per-parameter fields.

    Each parameter map is multiplied by (1 + variation * field) where the
    field is a Gaussian-smoothed white-noise image normalized to unit
    maximum amplitude; t2 <= t1 is re-imposed after modulation.
    """
    h, w = spec.shape
    labels = np.full((h, w), -1, dtype=np.int64)
    m0 = np.zeros((h, w))
    t1 = np.zeros((h, w))
    t2 = np.zeros((h, w))
    for i, region in enumerate(spec.regions):
        inside = _ellipse_mask(spec.shape, region)
        labels[inside] = i
        m0[inside] = region.m0
        t1[inside] = region.t1_ms
        t2[inside] = region.t2_ms
    mask = labels >= 0

    if spec.variation > 0:
        rng = np.random.default_rng(spec.seed)
        sigma = min(h, w) / 8.0
        for arr in (m0, t1, t2):
            field = gaussian_filter(rng.standard_normal((h, w)), sigma=sigma)
            peak = np.abs(field).max()
            if peak > 0:
                field /= peak
            arr *= 1.0 + spec.variation * field
        np.minimum(t2, t1, out=t2)  # keep the admissible ordering

    return PhantomMaps(m0=m0, t1_ms=t1, t2_ms=t2, mask=mask, labels=labels,
                       spec=spec)


def default_brain_spec(shape: tuple[int, int] = (64, 64), variation: float = 0.05,
                       seed: int = 0) -> PhantomSpec:
    """Brain-like arrangement with five tissue classes (incl. background):
    a gray-matter shell, white matter, a CSF ventricle, and a small lesion."""
    regions = (
        EllipseRegion("gray_matter", (0.50, 0.50), (0.42, 0.34), 0.0,
                      m0=1.0, t1_ms=1400.0, t2_ms=90.0),
        EllipseRegion("white_matter", (0.50, 0.50), (0.33, 0.25), 0.0,
                      m0=0.9, t1_ms=800.0, t2_ms=70.0),
        EllipseRegion("csf", (0.52, 0.47), (0.11, 0.06), 15.0,
                      m0=1.0, t1_ms=2800.0, t2_ms=300.0),
        EllipseRegion("lesion", (0.38, 0.64), (0.07, 0.09), 0.0,
                      m0=0.95, t1_ms=1100.0, t2_ms=150.0),
    )
    return PhantomSpec(regions=regions, shape=shape, variation=variation, seed=seed)


def mrf_brain_spec(shape: tuple[int, int] = (64, 64), variation: float = 0.03,
                   seed: int = 0) -> PhantomSpec:
    """Brain-like spec whose parameters stay inside the default dictionary
    grids even after smooth variation, so grid clamping never biases the
    matching comparison."""
    regions = (
        EllipseRegion("gray_matter", (0.50, 0.50), (0.42, 0.34), 0.0,
                      m0=1.0, t1_ms=1400.0, t2_ms=90.0),
        EllipseRegion("white_matter", (0.50, 0.50), (0.33, 0.25), 0.0,
                      m0=0.9, t1_ms=800.0, t2_ms=70.0),
        EllipseRegion("csf", (0.52, 0.47), (0.11, 0.06), 15.0,
                      m0=1.0, t1_ms=2600.0, t2_ms=270.0),
        EllipseRegion("lesion", (0.38, 0.64), (0.07, 0.09), 0.0,
                      m0=0.95, t1_ms=1100.0, t2_ms=150.0),
    )
    return PhantomSpec(regions=regions, shape=shape, variation=variation, seed=seed)


# ---------------------------------------------------------------------------
# corruption operators
# ---------------------------------------------------------------------------

def add_gaussian_noise(stack: np.ndarray, variance: float = 0.001,
                       seed: int = 0) -> np.ndarray:
    """i.i.d. zero-mean Gaussian noise with the given variance per element;
    complex data gets independent noise of that variance on each of the real
    and imaginary parts. Variance 0 returns an identical copy."""
    if variance < 0:
        raise ConfigError(f"noise variance cannot be negative, got {variance}")
    arr = np.asarray(stack)
    if variance == 0:
        return arr.copy()
    rng = np.random.default_rng(seed)
    sigma = float(np.sqrt(variance))
    if np.iscomplexobj(arr):
        noise = rng.normal(scale=sigma, size=arr.shape + (2,))
        return arr + noise[..., 0] + 1j * noise[..., 1]
    return arr + rng.normal(scale=sigma, size=arr.shape)


def undersampling_masks(n_frames: int, n_lines: int, acceleration: int,
                        seed: int = 0, center_lines: int = CENTER_LINES
                        ) -> np.ndarray:
    """Boolean (n_frames, n_lines) phase-encode retention patterns.

    Every frame keeps the ``center_lines`` central rows (of the centered
    spectrum) plus a random complement, n_lines // acceleration rows total;
    the random complement differs per frame.
    """
    if acceleration < 1 or int(acceleration) != acceleration:
        raise ConfigError(f"acceleration must be a positive integer, got {acceleration}")
    acceleration = int(acceleration)
    n_keep = n_lines // acceleration
    if n_keep < center_lines:
        raise ConfigError(
            f"acceleration {acceleration} keeps {n_keep} of {n_lines} lines, "
            f"fewer than the {center_lines} fully sampled central lines")
    lo = n_lines // 2 - center_lines // 2
    center = np.arange(lo, lo + center_lines)
    others = np.setdiff1d(np.arange(n_lines), center)
    rng = np.random.default_rng(seed)
    masks = np.zeros((n_frames, n_lines), dtype=bool)
    for t in range(n_frames):
        masks[t, center] = True
        extra = rng.permutation(others)[:n_keep - center_lines]
        masks[t, extra] = True
    return masks


def undersample_frames(stack: np.ndarray, acceleration: int, seed: int = 0,
                       center_lines: int = CENTER_LINES) -> np.ndarray:
    """Retrospective Cartesian undersampling of a (T, H, W) complex stack.

    Each frame is transformed to a centered 2-D spectrum, rows outside the
    frame's retention pattern are zeroed (phase-encode axis = image rows),
    and the frame is transformed back. Acceleration 1 keeps every line and
    reduces to an FFT round trip.
    """
    arr = np.asarray(stack, dtype=np.complex128)
    if arr.ndim != 3:
        raise ShapeError(f"stack must be (T, H, W), got {arr.shape}")
    t, h, _ = arr.shape
    masks = undersampling_masks(t, h, acceleration, seed=seed,
                                center_lines=center_lines)
    out = np.empty_like(arr)
    for i in range(t):
        k = np.fft.fftshift(np.fft.fft2(arr[i]))
        k[~masks[i], :] = 0.0
        out[i] = np.fft.ifft2(np.fft.ifftshift(k))
    return out


def rmse(estimate: np.ndarray, truth: np.ndarray,
         mask: np.ndarray | None = None) -> float:
    """Root-mean-square error, optionally restricted to a boolean mask."""
    est = np.asarray(estimate, dtype=np.float64)
    tru = np.asarray(truth, dtype=np.float64)
    if est.shape != tru.shape:
        raise ShapeError(f"shape mismatch: {est.shape} vs {tru.shape}")
    if mask is not None:
        if mask.shape != est.shape:
            raise ShapeError(f"mask shape {mask.shape} does not match {est.shape}")
        est, tru = est[mask], tru[mask]
    if est.size == 0:
        raise DataError("rmse over an empty selection")
    return float(np.sqrt(np.mean((est - tru) ** 2)))
