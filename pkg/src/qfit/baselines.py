"""Classical per-voxel estimators: variable-projection decay fitting,
log-linear decay fitting, and exhaustive dictionary matching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .signal_models import Dictionary, EchoProtocol
from .subspace import MatchResult, correlation_match_rows

GRID_POINTS = 200
REFINE_TOL_MS = 1e-4
_INVPHI = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class FitResult:
    m0: float
    t2_ms: float
    residual: float     # L2 norm of the model mismatch
    converged: bool


@dataclass(frozen=True, eq=False)
class ParameterMaps:
    m0: np.ndarray
    t2_ms: np.ndarray
    residual: np.ndarray
    valid: np.ndarray


def _validate_bounds(t2_bounds: tuple[float, float]) -> tuple[float, float]:
    lo, hi = float(t2_bounds[0]), float(t2_bounds[1])
    if not (0.0 < lo < hi):
        raise ConfigError(f"need 0 < t2_lo < t2_hi, got {t2_bounds}")
    return lo, hi


# one log-spaced candidate grid per (echo train, bounds); reused across voxels
_grid_cache: dict = {}


def _candidate_grid(te_ms: np.ndarray, lo: float, hi: float):
    key = (te_ms.tobytes(), lo, hi)
    hit = _grid_cache.get(key)
    if hit is None:
        t2s = np.logspace(np.log10(lo), np.log10(hi), GRID_POINTS)
        basis = np.exp(-te_ms[None, :] / t2s[:, None])   # (200, E)
        ee = np.einsum("ij,ij->i", basis, basis)
        hit = (t2s, basis, ee)
        _grid_cache[key] = hit
    return hit


def varpro_fit(signal: np.ndarray, protocol: EchoProtocol,
               t2_bounds: tuple[float, float] = (1.0, 3000.0)) -> FitResult:
    """Separable least squares for the mono-exponential model.

    The amplitude is eliminated in closed form; the decay time maximizes the
    projection score over a log-spaced candidate grid and is refined by a
    golden-section search to 1e-4 ms. An all-zero signal is degenerate and
    reported unconverged.
    """
    s = np.asarray(signal, dtype=np.float64)
    te = protocol.te_ms
    if s.shape != te.shape:
        raise ShapeError(f"signal has shape {s.shape}, protocol has {te.size} echoes")
    if not np.isfinite(s).all():
        raise DataError("signal contains non-finite samples")
    lo, hi = _validate_bounds(t2_bounds)
    if not s.any():
        return FitResult(m0=0.0, t2_ms=0.0, residual=0.0, converged=False)

    t2s, basis, ee = _candidate_grid(te, lo, hi)
    proj = basis @ s
    score = proj * proj / ee
    i = int(np.argmax(score))

    def neg_score(t2: float) -> float:
        e = np.exp(-te / t2)
        d = float(s @ e)
        return -(d * d) / float(e @ e)

    a = t2s[max(i - 1, 0)]
    b = t2s[min(i + 1, GRID_POINTS - 1)]
    if b - a > REFINE_TOL_MS:
        c = b - _INVPHI * (b - a)
        d = a + _INVPHI * (b - a)
        fc, fd = neg_score(c), neg_score(d)
        while b - a > REFINE_TOL_MS:
            if fc < fd:
                b, d, fd = d, c, fc
                c = b - _INVPHI * (b - a)
                fc = neg_score(c)
            else:
                a, c, fc = c, d, fd
                d = a + _INVPHI * (b - a)
                fd = neg_score(d)
    t2 = min(max(0.5 * (a + b), lo), hi)
    e = np.exp(-te / t2)
    m0 = float(s @ e) / float(e @ e)
    residual = float(np.linalg.norm(s - m0 * e))
    return FitResult(m0=m0, t2_ms=float(t2), residual=residual, converged=True)


def loglinear_fit(signal: np.ndarray, protocol: EchoProtocol) -> FitResult:
    """Weighted linear regression on ln(s) with weights s_i^2.

    Requires strictly positive samples. A non-negative slope means no decay
    is observable; the result is flagged unconverged.
    """
    s = np.asarray(signal, dtype=np.float64)
    te = protocol.te_ms
    if s.shape != te.shape:
        raise ShapeError(f"signal has shape {s.shape}, protocol has {te.size} echoes")
    if (s <= 0).any() or not np.isfinite(s).all():
        raise DataError("log-linear fit requires strictly positive samples")

    y = np.log(s)
    w = s * s
    sw = w.sum()
    sx = (w * te).sum()
    sy = (w * y).sum()
    sxx = (w * te * te).sum()
    sxy = (w * te * y).sum()
    denom = sw * sxx - sx * sx
    if denom <= 0:
        return FitResult(m0=0.0, t2_ms=0.0, residual=float(np.linalg.norm(s)),
                         converged=False)
    slope = (sw * sxy - sx * sy) / denom
    intercept = (sxx * sy - sx * sxy) / denom
    if slope >= 0:
        return FitResult(m0=0.0, t2_ms=0.0, residual=float(np.linalg.norm(s)),
                         converged=False)
    t2 = -1.0 / slope
    m0 = float(np.exp(intercept))
    residual = float(np.linalg.norm(s - m0 * np.exp(-te / t2)))
    return FitResult(m0=m0, t2_ms=float(t2), residual=residual, converged=True)


def fit_volume(stack: np.ndarray, protocol: EchoProtocol, method: str,
               mask: np.ndarray | None = None,
               t2_bounds: tuple[float, float] = (1.0, 3000.0)) -> ParameterMaps:
    """Run a scalar fitter over every voxel of an (E, H, W) stack.

    Voxels outside the mask, voxels where the fitter raises a domain error,
    and unconverged fits are marked invalid (and left zero); aggregates
    downstream must respect the ``valid`` map. Voxels are visited in
    row-major order, so results do not depend on scheduling.
    """
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 3:
        raise ShapeError(f"stack must be (E, H, W), got {stack.shape}")
    if stack.shape[0] != protocol.n_echoes:
        raise ShapeError(
            f"stack has {stack.shape[0]} echoes, protocol expects {protocol.n_echoes}")
    if method == "varpro":
        fitter = lambda s: varpro_fit(s, protocol, t2_bounds=t2_bounds)
    elif method == "loglinear":
        fitter = lambda s: loglinear_fit(s, protocol)
    else:
        raise ConfigError(f"unknown fit method {method!r}")
    _, h, w = stack.shape
    if mask is None:
        mask = np.ones((h, w), dtype=bool)
    if mask.shape != (h, w):
        raise ShapeError(f"mask shape {mask.shape} does not match stack {(h, w)}")

    m0 = np.zeros((h, w))
    t2 = np.zeros((h, w))
    residual = np.zeros((h, w))
    valid = np.zeros((h, w), dtype=bool)
    for yi in range(h):
        for xi in range(w):
            if not mask[yi, xi]:
                continue
            try:
                res = fitter(stack[:, yi, xi])
            except DataError:
                continue
            if not res.converged:
                continue
            m0[yi, xi] = res.m0
            t2[yi, xi] = res.t2_ms
            residual[yi, xi] = res.residual
            valid[yi, xi] = True
    return ParameterMaps(m0=m0, t2_ms=t2, residual=residual, valid=valid)


# ---------------------------------------------------------------------------
# exhaustive dictionary matching on full-length signals
# ---------------------------------------------------------------------------

def dict_match_full(signal: np.ndarray, dictionary: Dictionary) -> MatchResult:
    """Normalized-correlation match of one (T,) complex signal against every
    atom; ties take the lowest index."""
    s = np.asarray(signal, dtype=np.complex128)
    if s.shape != (dictionary.atoms.shape[1],):
        raise ShapeError(
            f"signal must have shape ({dictionary.atoms.shape[1]},), got {s.shape}")
    if np.linalg.norm(s) == 0:
        raise DataError("cannot match an all-zero signal")
    best, scale, corr = correlation_match_rows(s[None], dictionary.atoms,
                                               dictionary.atoms_unit)
    i = int(best[0])
    return MatchResult(index=i, t1_ms=float(dictionary.t1_ms[i]),
                       t2_ms=float(dictionary.t2_ms[i]),
                       scale=complex(scale[0]), correlation=float(corr[0]))


def dict_match_volume(stack: np.ndarray, dictionary: Dictionary,
                      mask: np.ndarray | None = None,
                      chunk_size: int = 256) -> dict[str, np.ndarray]:
    """Voxelwise full-length matching of a (T, H, W) complex stack."""
    arr = np.asarray(stack, dtype=np.complex128)
    t = dictionary.atoms.shape[1]
    if arr.ndim != 3 or arr.shape[0] != t:
        raise ShapeError(f"stack must be ({t}, H, W), got {arr.shape}")
    _, h, w = arr.shape
    if mask is None:
        mask = np.ones((h, w), dtype=bool)
    if mask.shape != (h, w):
        raise ShapeError(f"mask shape {mask.shape} does not match stack {(h, w)}")

    flat = arr.reshape(t, -1).T                       # (V, T)
    sel = mask.ravel() & (np.linalg.norm(flat, axis=1) > 0)
    idxs = np.flatnonzero(sel)
    t1 = np.zeros(h * w)
    t2 = np.zeros(h * w)
    scale = np.zeros(h * w, dtype=np.complex128)
    corr = np.zeros(h * w)
    best, s, c = correlation_match_rows(flat[idxs], dictionary.atoms,
                                        dictionary.atoms_unit, chunk_size)
    t1[idxs] = dictionary.t1_ms[best]
    t2[idxs] = dictionary.t2_ms[best]
    scale[idxs] = s
    corr[idxs] = c
    return {
        "t1_ms": t1.reshape(h, w),
        "t2_ms": t2.reshape(h, w),
        "scale": scale.reshape(h, w),
        "correlation": corr.reshape(h, w),
        "valid": sel.reshape(h, w),
    }
