"""Forward signal models: multi-echo decay and gradient-spoiled transient
sequences simulated with extended phase graphs.

The EPG simulation tracks configuration states (F+_k, F-_k, Z_k) per
dephasing order k. RF pulses rotate about the x axis, so with a real
initial Z the F states stay purely imaginary and Z stays real throughout;
the simulation therefore stores three real arrays (f, g, z) defined by
F+_k = i f_k, F-_k = i g_k, Z_k = z_k, and reconstitutes the complex echo
signal i * f_0 at readout. One unbalanced gradient per repetition shifts
F orders up (F+) / down (F-), with F+_0 refilled by conj(F-_0).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, QfitError, ShapeError

DEFAULT_STATE_CAP = 100


# ---------------------------------------------------------------------------
# multi-echo protocols and the mono-exponential model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EchoProtocol:
    """Uniformly spaced echo train: te_i = te_first + i * te_step."""

    te_first_ms: float
    te_step_ms: float
    n_echoes: int

    def __post_init__(self):
        if self.te_first_ms <= 0 or self.te_step_ms <= 0:
            raise ConfigError("echo times must be positive and increasing")
        if self.n_echoes < 2:
            raise ConfigError(f"need at least 2 echoes, got {self.n_echoes}")

    @property
    def te_ms(self) -> np.ndarray:
        return self.te_first_ms + self.te_step_ms * np.arange(self.n_echoes)

    @classmethod
    def t2_mapping_10echo(cls) -> "EchoProtocol":
        """Spin-echo T2 mapping train: 10 echoes, first at 6 ms, 6 ms apart."""
        return cls(te_first_ms=6.0, te_step_ms=6.0, n_echoes=10)

    @classmethod
    def t2star_mapping_4echo(cls) -> "EchoProtocol":
        """Gradient-echo T2* train: 4 echoes, first at 43 ms, 24 ms apart."""
        return cls(te_first_ms=43.0, te_step_ms=24.0, n_echoes=4)


def mono_exp_synth(m0: Tensor, t2_ms: Tensor, protocol: EchoProtocol) -> Tensor:
    """Differentiable echo-stack synthesis: stack_e = m0 * exp(-te_e / t2).

    ``m0`` and ``t2_ms`` are (N, 1, H, W) tensors; the result stacks echoes
    along the channel axis, (N, E, H, W).
    """
    m0, t2_ms = ad.as_tensor(m0), ad.as_tensor(t2_ms)
    if m0.shape != t2_ms.shape:
        raise ShapeError(f"m0 and t2 shapes differ: {m0.shape} vs {t2_ms.shape}")
    if m0.ndim != 4 or m0.shape[1] != 1:
        raise ShapeError(f"parameter maps must be (N, 1, H, W), got {m0.shape}")
    if not (t2_ms.data > 0).all():
        raise ShapeError("t2 must be positive everywhere for synthesis")
    echoes = [ad.mul(m0, ad.exp(ad.div(-float(te), t2_ms)))
              for te in protocol.te_ms]
    return ad.concat(echoes, axis=1)


def synth_stack(m0: np.ndarray, t2_ms: np.ndarray, protocol: EchoProtocol,
                mask: np.ndarray | None = None) -> np.ndarray:
    """Plain-array twin of ``mono_exp_synth`` for data generation.

    ``m0``/``t2_ms`` are (H, W) maps; voxels outside ``mask`` produce zero
    signal. Returns (E, H, W).
    """
    m0 = np.asarray(m0, dtype=np.float64)
    t2 = np.asarray(t2_ms, dtype=np.float64)
    if m0.shape != t2.shape or m0.ndim != 2:
        raise ShapeError(f"maps must be matching 2-D arrays, got {m0.shape} and {t2.shape}")
    if mask is None:
        mask = np.ones(m0.shape, dtype=bool)
    if mask.shape != m0.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match maps {m0.shape}")
    if not (t2[mask] > 0).all():
        raise ShapeError("t2 must be positive inside the mask")
    te = protocol.te_ms
    safe_t2 = np.where(mask, t2, 1.0)
    stack = m0[None] * np.exp(-te[:, None, None] / safe_t2[None])
    stack *= mask[None]
    return stack


# ---------------------------------------------------------------------------
# transient gradient-spoiled sequence
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FispSchedule:
    """Flip-angle series plus timing of a gradient-spoiled acquisition."""

    flip_deg: np.ndarray
    tr_ms: float = 12.0
    te_ms: float = 2.0
    inversion: bool = True
    inv_delay_ms: float = 0.0

    def __post_init__(self):
        flips = np.asarray(self.flip_deg, dtype=np.float64)
        object.__setattr__(self, "flip_deg", flips)
        if flips.ndim != 1 or flips.size < 1:
            raise ConfigError("flip_deg must be a non-empty 1-D series")
        if (flips < 0).any() or (flips > 180).any():
            raise ConfigError("flip angles must lie in [0, 180] degrees")
        if not (0 < self.te_ms < self.tr_ms):
            raise ConfigError(
                f"need 0 < TE < TR, got TE={self.te_ms}, TR={self.tr_ms}")
        if self.inv_delay_ms < 0:
            raise ConfigError("inversion delay cannot be negative")

    @property
    def n_tr(self) -> int:
        return int(self.flip_deg.size)

    def to_dict(self) -> dict:
        return {
            "flip_deg": [float(v) for v in self.flip_deg],
            "tr_ms": self.tr_ms,
            "te_ms": self.te_ms,
            "inversion": self.inversion,
            "inv_delay_ms": self.inv_delay_ms,
        }


def default_schedule(n_tr: int = 600) -> FispSchedule:
    """Inversion-prepared sinusoidal flip series, 10 + 50|sin(pi i/250)| deg,
    TR 12 ms, TE 2 ms."""
    i = np.arange(n_tr)
    flips = 10.0 + 50.0 * np.abs(np.sin(np.pi * i / 250.0))
    return FispSchedule(flip_deg=flips, tr_ms=12.0, te_ms=2.0, inversion=True)


def _validate_tissue(t1_ms: np.ndarray, t2_ms: np.ndarray, m0: np.ndarray) -> None:
    if (t1_ms <= 0).any() or (t2_ms <= 0).any():
        raise ConfigError("relaxation times must be positive")
    if (m0 < 0).any():
        raise ConfigError("equilibrium magnetization cannot be negative")


def epg_fisp_batch(t1_ms, t2_ms, schedule: FispSchedule, m0=1.0,
                   max_states: int | None = None) -> np.ndarray:
    """Simulate many tissues at once; returns complex (n, n_tr) echo signals.

    Dephasing orders are truncated at min(n_tr, cap) with cap defaulting to
    100; states pushed past the cap are discarded.
    """
    t1 = np.atleast_1d(np.asarray(t1_ms, dtype=np.float64))
    t2 = np.atleast_1d(np.asarray(t2_ms, dtype=np.float64))
    if t1.shape != t2.shape or t1.ndim != 1:
        raise ShapeError(f"t1 and t2 must be matching 1-D arrays, got {t1.shape}, {t2.shape}")
    m0a = np.broadcast_to(np.asarray(m0, dtype=np.float64), t1.shape).copy()
    _validate_tissue(t1, t2, m0a)
    cap = DEFAULT_STATE_CAP if max_states is None else int(max_states)
    if cap < 1:
        raise ConfigError(f"max_states must be positive, got {max_states}")

    n = t1.size
    n_tr = schedule.n_tr
    n_orders = min(n_tr, cap) + 1  # orders 0..min(n_tr, cap)
    f = np.zeros((n, n_orders))
    g = np.zeros((n, n_orders))
    z = np.zeros((n, n_orders))
    z[:, 0] = m0a

    def relax(dt_ms: float) -> None:
        e1 = np.exp(-dt_ms / t1)[:, None]
        e2 = np.exp(-dt_ms / t2)[:, None]
        f[:] *= e2
        g[:] *= e2
        z[:] *= e1
        z[:, 0] += m0a * (1.0 - e1[:, 0])

    if schedule.inversion:
        z *= -1.0
        if schedule.inv_delay_ms > 0:
            relax(schedule.inv_delay_ms)

    flips_rad = np.radians(schedule.flip_deg)
    te = schedule.te_ms
    rem = schedule.tr_ms - schedule.te_ms
    sig = np.zeros((n, n_tr))

    for i in range(n_tr):
        a = flips_rad[i]
        ca2 = np.cos(a / 2.0) ** 2
        sa2 = np.sin(a / 2.0) ** 2
        sa = np.sin(a)
        ca = np.cos(a)
        fn = ca2 * f + sa2 * g - sa * z
        gn = sa2 * f + ca2 * g + sa * z
        zn = 0.5 * sa * (f - g) + ca * z
        f, g, z = fn, gn, zn
        relax(te)
        sig[:, i] = f[:, 0]
        relax(rem)
        # unbalanced gradient: F+ orders move up, F- orders move down,
        # and the new F+_0 is conj(F-_0) (sign flip in the i-factored basis)
        f[:, 1:] = f[:, :-1]
        g[:, :-1] = g[:, 1:]
        g[:, -1] = 0.0
        f[:, 0] = -g[:, 0]

    return 1j * sig


def epg_fisp(t1_ms: float, t2_ms: float, schedule: FispSchedule, m0: float = 1.0,
             max_states: int | None = None) -> np.ndarray:
    """Single-tissue echo signal, complex (n_tr,)."""
    return epg_fisp_batch([t1_ms], [t2_ms], schedule, m0=m0,
                          max_states=max_states)[0]


# ---------------------------------------------------------------------------
# dictionaries over relaxation-parameter grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Dictionary:
    """Simulated signal evolutions over an admissible (t1, t2) grid."""

    atoms: np.ndarray        # (n, n_tr) complex
    atoms_unit: np.ndarray   # atoms scaled to unit L2 norm
    norms: np.ndarray        # (n,)
    t1_ms: np.ndarray        # (n,)
    t2_ms: np.ndarray        # (n,)
    t1_grid: np.ndarray
    t2_grid: np.ndarray
    schedule: FispSchedule

    @property
    def n_atoms(self) -> int:
        return int(self.atoms.shape[0])


def default_t1_grid_ms() -> np.ndarray:
    return np.arange(100.0, 3000.0 + 1e-9, 20.0)


def default_t2_grid_ms() -> np.ndarray:
    return np.arange(10.0, 300.0 + 1e-9, 2.0)


def generate_dictionary(t1_grid_ms, t2_grid_ms, schedule: FispSchedule,
                        max_states: int | None = None) -> Dictionary:
    """Simulate every admissible grid pair (t2 <= t1), t1-major order."""
    t1g = np.asarray(t1_grid_ms, dtype=np.float64)
    t2g = np.asarray(t2_grid_ms, dtype=np.float64)
    if t1g.ndim != 1 or t2g.ndim != 1 or t1g.size == 0 or t2g.size == 0:
        raise ConfigError("parameter grids must be non-empty 1-D arrays")
    if (t1g <= 0).any() or (t2g <= 0).any():
        raise ConfigError("grid values must be positive")

    pairs_t1, pairs_t2 = [], []
    for t1 in t1g:
        for t2 in t2g:
            if t2 <= t1:
                pairs_t1.append(t1)
                pairs_t2.append(t2)
    if not pairs_t1:
        raise ConfigError("admissible set is empty: every grid t2 exceeds every t1")
    t1s = np.array(pairs_t1)
    t2s = np.array(pairs_t2)

    atoms = epg_fisp_batch(t1s, t2s, schedule, max_states=max_states)
    norms = np.linalg.norm(atoms, axis=1)
    if (norms == 0).any():
        raise QfitError("dictionary contains an all-zero signal evolution")
    return Dictionary(atoms=atoms, atoms_unit=atoms / norms[:, None],
                      norms=norms, t1_ms=t1s, t2_ms=t2s,
                      t1_grid=t1g, t2_grid=t2g, schedule=schedule)
