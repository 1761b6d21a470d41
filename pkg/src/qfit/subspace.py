"""Low-rank temporal subspace for transient signal evolutions.

The dictionary's unit-norm atoms (split into real and imaginary rows) are
factored by an SVD; the leading right-singular vectors form an orthonormal
temporal basis. The basis size is the smallest K whose cumulative squared
singular values reach the requested energy fraction. Time series project to
K complex coefficients and synthesize back as coefficient-basis products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, QfitError, ShapeError
from .signal_models import Dictionary


@dataclass(frozen=True, eq=False)
class SubspaceBasis:
    phi: np.ndarray               # (K, T), orthonormal rows, float64
    singular_values: np.ndarray   # full spectrum, descending
    energy_target: float
    retained_energy: float        # fraction actually captured by K rows

    @property
    def rank(self) -> int:
        return int(self.phi.shape[0])

    @property
    def n_timepoints(self) -> int:
        return int(self.phi.shape[1])


def minimal_rank(singular_values: np.ndarray, energy_target: float) -> int:
    """Smallest K with sum(s[:K]**2) / sum(s**2) >= energy_target."""
    if not (0.0 < energy_target <= 1.0):
        raise ConfigError(f"energy target must be in (0, 1], got {energy_target}")
    s2 = np.asarray(singular_values, dtype=np.float64) ** 2
    total = s2.sum()
    if total <= 0:
        raise QfitError("all singular values are zero")
    frac = np.cumsum(s2) / total
    k = int(np.searchsorted(frac, energy_target - 1e-12) + 1)
    return min(k, s2.size)  # guard against frac[-1] rounding below 1.0


def compress_dictionary(dictionary: Dictionary, energy_target: float = 0.95
                        ) -> SubspaceBasis:
    """SVD of the unit atoms' real/imaginary rows, truncated by energy."""
    atoms = dictionary.atoms_unit
    stacked = np.vstack([atoms.real, atoms.imag])
    _, s, vt = np.linalg.svd(stacked, full_matrices=False)
    k = minimal_rank(s, energy_target)
    retained = float((s[:k] ** 2).sum() / (s ** 2).sum())
    return SubspaceBasis(phi=np.ascontiguousarray(vt[:k]), singular_values=s,
                         energy_target=energy_target, retained_energy=retained)


def project(series: np.ndarray, basis: SubspaceBasis) -> np.ndarray:
    """(..., T) time series -> (..., K) coefficients."""
    series = np.asarray(series)
    if series.shape[-1] != basis.n_timepoints:
        raise ShapeError(
            f"series has {series.shape[-1]} timepoints, basis expects "
            f"{basis.n_timepoints}")
    return series @ basis.phi.T


def synth_timeseries(coeffs: np.ndarray, basis: SubspaceBasis) -> np.ndarray:
    """(..., K) coefficients -> (..., T) time series."""
    coeffs = np.asarray(coeffs)
    if coeffs.shape[-1] != basis.rank:
        raise ShapeError(
            f"coefficients have {coeffs.shape[-1]} entries, basis rank is "
            f"{basis.rank}")
    return coeffs @ basis.phi


def reconstruct(series: np.ndarray, basis: SubspaceBasis) -> np.ndarray:
    """Orthogonal projection of a time series onto the basis span."""
    return synth_timeseries(project(series, basis), basis)


# ---------------------------------------------------------------------------
# matching in coefficient space
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CompressedDictionary:
    """Dictionary atoms projected to subspace coefficients."""

    coeffs: np.ndarray        # (n, K) complex
    coeffs_unit: np.ndarray   # rows scaled to unit norm
    norms: np.ndarray         # coefficient-space norms, (n,)
    t1_ms: np.ndarray
    t2_ms: np.ndarray
    basis: SubspaceBasis

    @property
    def n_atoms(self) -> int:
        return int(self.coeffs.shape[0])

    @property
    def rank(self) -> int:
        return int(self.coeffs.shape[1])


def compress_atoms(dictionary: Dictionary, basis: SubspaceBasis
                   ) -> CompressedDictionary:
    coeffs = project(dictionary.atoms, basis)
    norms = np.linalg.norm(coeffs, axis=1)
    if (norms == 0).any():
        raise QfitError("an atom projects to zero in the subspace")
    return CompressedDictionary(coeffs=coeffs, coeffs_unit=coeffs / norms[:, None],
                                norms=norms, t1_ms=dictionary.t1_ms,
                                t2_ms=dictionary.t2_ms, basis=basis)


@dataclass(frozen=True)
class MatchResult:
    index: int
    t1_ms: float
    t2_ms: float
    scale: complex       # least-squares amplitude of the matched atom
    correlation: float   # normalized |inner product| at the match


def correlation_match_rows(queries: np.ndarray, ref: np.ndarray,
                           ref_unit: np.ndarray, chunk_size: int = 256
                           ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Match query rows against reference rows by normalized |inner product|.

    Returns (best_index, scale, correlation) per query row. Ties take the
    lowest reference index. Chunking bounds the score matrix; results are
    independent of the chunk size.
    """
    q = np.asarray(queries, dtype=np.complex128)
    best = np.zeros(q.shape[0], dtype=np.int64)
    scale = np.zeros(q.shape[0], dtype=np.complex128)
    corr = np.zeros(q.shape[0])
    unit_ct = ref_unit.conj().T
    for lo in range(0, q.shape[0], chunk_size):
        rows = q[lo:lo + chunk_size]
        scores = np.abs(rows @ unit_ct)
        idx = np.argmax(scores, axis=1)
        atoms = ref[idx]
        denom = np.einsum("ij,ij->i", atoms.conj(), atoms).real
        scale[lo:lo + chunk_size] = np.einsum("ij,ij->i", atoms.conj(), rows) / denom
        best[lo:lo + chunk_size] = idx
        corr[lo:lo + chunk_size] = (scores[np.arange(rows.shape[0]), idx]
                                    / np.linalg.norm(rows, axis=1))
    return best, scale, corr


def match_compressed(query: np.ndarray, cdict: CompressedDictionary
                     ) -> MatchResult:
    """Exhaustive normalized-correlation match over coefficient vectors.

    Ties take the lowest atom index (argmax returns the first maximum).
    """
    q = np.asarray(query, dtype=np.complex128)
    if q.shape != (cdict.rank,):
        raise ShapeError(f"query must have shape ({cdict.rank},), got {q.shape}")
    qn = np.linalg.norm(q)
    if qn == 0:
        raise QfitError("cannot match an all-zero query")
    scores = np.abs(cdict.coeffs_unit.conj() @ q)
    idx = int(np.argmax(scores))
    atom = cdict.coeffs[idx]
    scale = np.vdot(atom, q) / np.vdot(atom, atom).real
    return MatchResult(index=idx, t1_ms=float(cdict.t1_ms[idx]),
                       t2_ms=float(cdict.t2_ms[idx]), scale=complex(scale),
                       correlation=float(scores[idx] / qn))


def match_compressed_volume(coeff_maps: np.ndarray, cdict: CompressedDictionary,
                            mask: np.ndarray | None = None,
                            chunk_size: int = 256) -> dict[str, np.ndarray]:
    """Voxelwise matching of (H, W, K) coefficient maps.

    Voxels outside the mask (or with zero coefficients) are marked invalid
    and left zero. Matching runs in voxel chunks so the score matrix stays
    small; results are identical to per-voxel ``match_compressed``.
    """
    cm = np.asarray(coeff_maps, dtype=np.complex128)
    if cm.ndim != 3 or cm.shape[-1] != cdict.rank:
        raise ShapeError(
            f"coefficient maps must be (H, W, {cdict.rank}), got {cm.shape}")
    h, w, k = cm.shape
    if mask is None:
        mask = np.ones((h, w), dtype=bool)
    if mask.shape != (h, w):
        raise ShapeError(f"mask shape {mask.shape} does not match maps {(h, w)}")

    flat = cm.reshape(-1, k)
    sel = mask.ravel() & (np.linalg.norm(flat, axis=1) > 0)
    idxs = np.flatnonzero(sel)

    t1 = np.zeros((h * w,))
    t2 = np.zeros((h * w,))
    scale = np.zeros((h * w,), dtype=np.complex128)
    corr = np.zeros((h * w,))

    best, s, c = correlation_match_rows(flat[idxs], cdict.coeffs,
                                        cdict.coeffs_unit, chunk_size)
    t1[idxs] = cdict.t1_ms[best]
    t2[idxs] = cdict.t2_ms[best]
    scale[idxs] = s
    corr[idxs] = c

    return {
        "t1_ms": t1.reshape(h, w),
        "t2_ms": t2.reshape(h, w),
        "scale": scale.reshape(h, w),
        "correlation": corr.reshape(h, w),
        "valid": sel.reshape(h, w),
    }
