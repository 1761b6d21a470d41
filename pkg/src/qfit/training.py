"""Scan-specific self-supervised training loops.

No labels are involved anywhere: the network maps the measured image stack
to parameter (or coefficient) maps, the forward signal model synthesizes
the stack those maps imply, and the mismatch between synthesis and
measurement is the loss. Training is therefore per dataset; the returned
maps come from the best-loss iterate, never a later one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (ConfigError, DataError, NonFiniteError, ShapeError,
                     TrainingDivergedError)
from .losses import SsimConfig, l1_loss, ssim_loss
from .network import (MappingNetwork, NetworkConfig, linear_activations,
                      relaxometry_activations)
from .optim import Adam, AdamConfig
from .signal_models import EchoProtocol, mono_exp_synth
from .subspace import (CompressedDictionary, SubspaceBasis,
                       match_compressed_volume, project)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    iterations: int = 2000
    seed: int = 0
    early_stop_patience: int = 200
    early_stop_min_delta: float = 1e-6

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be positive, got {self.iterations}")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be positive")
        if self.early_stop_min_delta < 0:
            raise ConfigError("early_stop_min_delta cannot be negative")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")


class _BestTracker:
    """Keeps the lowest loss seen, the iterate snapshot that produced it,
    and the early-stopping clock."""

    def __init__(self, patience: int, min_delta: float):
        self.best_loss = np.inf
        self.best_iteration = -1
        self.snapshot = None
        self._patience = patience
        self._min_delta = min_delta
        self._last_significant = 0

    def update(self, it: int, loss: float, snapshot) -> bool:
        """Record iterate ``it``; returns True when training should stop."""
        if loss < self.best_loss - self._min_delta:
            self._last_significant = it
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_iteration = it
            self.snapshot = snapshot
        return it - self._last_significant >= self._patience


def normalization_scale(stack: np.ndarray) -> float:
    """Scale factor: 99th percentile of the magnitude."""
    scale = float(np.percentile(np.abs(stack), 99))
    if not np.isfinite(scale) or scale <= 0:
        raise DataError("cannot normalize a stack with no signal content")
    return scale


# ---------------------------------------------------------------------------
# multi-echo relaxometry
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class RelaxometryResult:
    m0: np.ndarray              # (H, W), in input units
    t2_ms: np.ndarray           # (H, W)
    loss_history: np.ndarray    # loss at every completed iteration
    best_iteration: int
    best_loss: float
    normalization: float


def default_relaxometry_network(n_echoes: int, base_width: int = 64,
                                n_residual_blocks: int = 9,
                                t2_bounds_ms: tuple[float, float] = (1.0, 3000.0)
                                ) -> NetworkConfig:
    return NetworkConfig(in_channels=n_echoes, out_channels=2,
                         base_width=base_width,
                         n_residual_blocks=n_residual_blocks,
                         out_activations=relaxometry_activations(*t2_bounds_ms))


def train_relaxometry(stack: np.ndarray, protocol: EchoProtocol,
                      net_config: NetworkConfig | None = None,
                      train_config: TrainConfig | None = None,
                      ssim_config: SsimConfig | None = None
                      ) -> RelaxometryResult:
    """Fit amplitude and decay maps to one echo stack by synthesis matching.

    The stack is normalized by its 99th-percentile magnitude; the SSIM loss
    compares the mono-exponential synthesis of the predicted maps against
    the normalized input. The amplitude map is reported back in input units.
    """
    arr = np.asarray(stack, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"stack must be (E, H, W), got {arr.shape}")
    if arr.shape[0] != protocol.n_echoes:
        raise ShapeError(
            f"stack has {arr.shape[0]} echoes, protocol expects {protocol.n_echoes}")
    tc = train_config or TrainConfig()
    cfg = net_config or default_relaxometry_network(protocol.n_echoes)
    if cfg.in_channels != protocol.n_echoes or cfg.out_channels != 2:
        raise ConfigError(
            f"network must map {protocol.n_echoes} echoes to 2 channels, "
            f"got {cfg.in_channels} -> {cfg.out_channels}")

    scale = normalization_scale(arr)
    xn = arr / scale
    x_t = Tensor(xn[None])
    ssim_cfg = ssim_config or SsimConfig.from_stack(xn)

    net = MappingNetwork(cfg, seed=tc.seed)
    opt = Adam(net.params, AdamConfig(lr=tc.lr))
    tracker = _BestTracker(tc.early_stop_patience, tc.early_stop_min_delta)
    history = []

    for it in range(tc.iterations):
        try:
            pred = net.predict(x_t)
            m0_t = ad.narrow(pred, 1, 0, 1)
            t2_t = ad.narrow(pred, 1, 1, 1)
            synth = mono_exp_synth(m0_t, t2_t, protocol)
            loss = ssim_loss(synth, x_t, ssim_cfg)
        except NonFiniteError as e:
            raise TrainingDivergedError(
                f"non-finite loss at iteration {it}: {e}") from e
        loss_val = loss.item()
        history.append(loss_val)
        stop = tracker.update(it, loss_val,
                              (m0_t.data[0, 0].copy(), t2_t.data[0, 0].copy()))
        if stop or it == tc.iterations - 1:
            break
        ad.backward(loss, params=net.params)
        opt.step()

    m0_map, t2_map = tracker.snapshot
    return RelaxometryResult(m0=m0_map * scale, t2_ms=t2_map,
                             loss_history=np.array(history),
                             best_iteration=tracker.best_iteration,
                             best_loss=tracker.best_loss,
                             normalization=scale)


# ---------------------------------------------------------------------------
# fingerprinting in a temporal subspace
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class MrfResult:
    coeff_maps: np.ndarray      # (H, W, K) complex, in input units
    t1_ms: np.ndarray | None    # matching results; None when no dictionary given
    t2_ms: np.ndarray | None
    m0: np.ndarray | None       # |matched scale| in input units
    valid: np.ndarray | None
    loss_history: np.ndarray
    best_iteration: int
    best_loss: float
    normalization: float


def default_mrf_network(rank: int, base_width: int = 64,
                        n_residual_blocks: int = 9) -> NetworkConfig:
    return NetworkConfig(in_channels=2 * rank, out_channels=2 * rank,
                         base_width=base_width,
                         n_residual_blocks=n_residual_blocks,
                         out_activations=linear_activations(2 * rank))


def train_mrf(stack: np.ndarray, basis: SubspaceBasis,
              cdict: CompressedDictionary | None = None,
              net_config: NetworkConfig | None = None,
              train_config: TrainConfig | None = None,
              input_mode: str = "projected") -> MrfResult:
    """Fit subspace coefficient maps to one transient image series.

    The network input is the measured series projected to coefficient planes
    (real and imaginary parts as channels; ``input_mode="raw"`` feeds the 2T
    raw frame planes instead). The predicted coefficients synthesize the
    full-length series through the basis, and the L1 mismatch against the
    measured frames (averaged over the real and imaginary planes) is
    minimized. When a compressed dictionary is supplied, the best-loss
    coefficient maps are matched to relaxation parameters voxel by voxel.
    """
    arr = np.asarray(stack, dtype=np.complex128)
    if arr.ndim != 3:
        raise ShapeError(f"stack must be (T, H, W), got {arr.shape}")
    t, h, w = arr.shape
    if t != basis.n_timepoints:
        raise ShapeError(
            f"stack has {t} frames, basis expects {basis.n_timepoints}")
    if input_mode not in ("projected", "raw"):
        raise ConfigError(f"unknown input mode {input_mode!r}")
    k = basis.rank
    tc = train_config or TrainConfig()
    cfg = net_config or default_mrf_network(k)
    in_ch = 2 * k if input_mode == "projected" else 2 * t
    if cfg.in_channels != in_ch or cfg.out_channels != 2 * k:
        raise ConfigError(
            f"network must map {in_ch} -> {2 * k} channels for "
            f"input_mode={input_mode!r}, got {cfg.in_channels} -> {cfg.out_channels}")

    scale = normalization_scale(arr)
    xn = arr / scale
    series = np.moveaxis(xn, 0, -1)              # (H, W, T)
    if input_mode == "projected":
        cin = project(series, basis)             # (H, W, K) complex
        planes = np.concatenate([cin.real, cin.imag], axis=-1)  # (H, W, 2K)
    else:
        planes = np.concatenate([series.real, series.imag], axis=-1)
    x_t = Tensor(np.moveaxis(planes, -1, 0)[None])  # (1, C, H, W)

    flat = series.reshape(-1, t)
    re_target = Tensor(np.ascontiguousarray(flat.real))   # (V, T)
    im_target = Tensor(np.ascontiguousarray(flat.imag))
    phi_t = Tensor(basis.phi)                              # (K, T)

    net = MappingNetwork(cfg, seed=tc.seed)
    opt = Adam(net.params, AdamConfig(lr=tc.lr))
    tracker = _BestTracker(tc.early_stop_patience, tc.early_stop_min_delta)
    history = []

    for it in range(tc.iterations):
        try:
            out = net.predict(x_t)                         # (1, 2K, H, W)
            re_c = ad.transpose(ad.reshape(ad.narrow(out, 1, 0, k), (k, h * w)), (1, 0))
            im_c = ad.transpose(ad.reshape(ad.narrow(out, 1, k, k), (k, h * w)), (1, 0))
            re_s = ad.matmul(re_c, phi_t)                  # (V, T)
            im_s = ad.matmul(im_c, phi_t)
            loss = ad.mul(0.5, ad.add(l1_loss(re_s, re_target),
                                      l1_loss(im_s, im_target)))
        except NonFiniteError as e:
            raise TrainingDivergedError(
                f"non-finite loss at iteration {it}: {e}") from e
        loss_val = loss.item()
        history.append(loss_val)
        cmap = (re_c.data + 1j * im_c.data).reshape(h, w, k)
        stop = tracker.update(it, loss_val, cmap)
        if stop or it == tc.iterations - 1:
            break
        ad.backward(loss, params=net.params)
        opt.step()

    coeff = tracker.snapshot * scale
    t1_map = t2_map = m0_map = valid = None
    if cdict is not None:
        if cdict.rank != k:
            raise ConfigError(
                f"dictionary rank {cdict.rank} does not match basis rank {k}")
        match = match_compressed_volume(coeff, cdict)
        t1_map = match["t1_ms"]
        t2_map = match["t2_ms"]
        m0_map = np.abs(match["scale"])
        valid = match["valid"]
    return MrfResult(coeff_maps=coeff, t1_ms=t1_map, t2_ms=t2_map, m0=m0_map,
                     valid=valid, loss_history=np.array(history),
                     best_iteration=tracker.best_iteration,
                     best_loss=tracker.best_loss, normalization=scale)
