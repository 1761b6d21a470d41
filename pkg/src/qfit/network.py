"""Residual convolutional network that maps contrast stacks to parameter maps.

Layout: one head block (conv 3x3 -> instance norm -> relu), a chain of
residual blocks (conv -> norm -> relu -> conv -> norm, skip add, relu), and
a 1x1 projection to the output channels. Spatial size is preserved
throughout; the image stack is the only input, so the network is trained
per scan rather than across a corpus.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class OutActivation:
    """Per-channel output mapping constraining the physical range."""

    kind: str  # "linear" | "softplus" | "bounded"
    lo: float | None = None
    hi: float | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "softplus", "bounded"):
            raise ConfigError(f"unknown output activation kind {self.kind!r}")
        if self.kind == "bounded":
            if self.lo is None or self.hi is None or not (self.lo < self.hi):
                raise ConfigError(
                    f"bounded activation needs lo < hi, got ({self.lo}, {self.hi})")

    def apply(self, raw: Tensor) -> Tensor:
        if self.kind == "linear":
            return raw
        if self.kind == "softplus":
            return ad.softplus(raw)
        return ad.add(self.lo, ad.mul(self.hi - self.lo, ad.sigmoid(raw)))


def relaxometry_activations(t2_min_ms: float = 1.0, t2_max_ms: float = 3000.0
                            ) -> tuple[OutActivation, OutActivation]:
    """Amplitude kept positive by softplus; decay time boxed into its bounds."""
    return (OutActivation("softplus"),
            OutActivation("bounded", lo=t2_min_ms, hi=t2_max_ms))


def linear_activations(n: int) -> tuple[OutActivation, ...]:
    return tuple(OutActivation("linear") for _ in range(n))


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int
    out_channels: int
    base_width: int = 64
    n_residual_blocks: int = 9
    kernel_size: int = 3
    out_activations: tuple[OutActivation, ...] = field(default=())

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.base_width < 1:
            raise ConfigError("base_width must be positive")
        if self.n_residual_blocks < 1:
            raise ConfigError("need at least one residual block")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        acts = self.out_activations or linear_activations(self.out_channels)
        if len(acts) != self.out_channels:
            raise ConfigError(
                f"{len(acts)} output activations for {self.out_channels} channels")
        object.__setattr__(self, "out_activations", tuple(acts))

    @property
    def receptive_margin(self) -> int:
        """Half-width of the receptive field: interior pixels farther than
        this from every border are unaffected by zero padding."""
        per_conv = self.kernel_size // 2
        return (1 + 2 * self.n_residual_blocks) * per_conv


def parameter_shapes(config: NetworkConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Name and shape of every parameter, in the order ``run_forward`` consumes
    them: head conv w/b, head norm gamma/beta, per block (conv1 w/b, norm1
    gamma/beta, conv2 w/b, norm2 gamma/beta), tail conv w/b."""
    c, w, k, o = (config.in_channels, config.base_width, config.kernel_size,
                  config.out_channels)
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("head.conv.w", (w, c, k, k)), ("head.conv.b", (w,)),
        ("head.norm.gamma", (w,)), ("head.norm.beta", (w,)),
    ]
    for i in range(config.n_residual_blocks):
        shapes += [
            (f"block{i}.conv1.w", (w, w, k, k)), (f"block{i}.conv1.b", (w,)),
            (f"block{i}.norm1.gamma", (w,)), (f"block{i}.norm1.beta", (w,)),
            (f"block{i}.conv2.w", (w, w, k, k)), (f"block{i}.conv2.b", (w,)),
            (f"block{i}.norm2.gamma", (w,)), (f"block{i}.norm2.beta", (w,)),
        ]
    shapes += [("tail.conv.w", (o, w, 1, 1)), ("tail.conv.b", (o,))]
    return shapes


def init_parameters(config: NetworkConfig, seed: int = 0) -> list[np.ndarray]:
    """Convolution weights and biases drawn uniform(-s, s) with
    s = 1/sqrt(fan_in); norm scales start at 1, shifts at 0."""
    rng = np.random.default_rng(seed)
    out = []
    for name, shape in parameter_shapes(config):
        if name.endswith(".w"):
            fan_in = shape[1] * shape[2] * shape[3]
            out.append(rng.uniform(-1, 1, size=shape) / np.sqrt(fan_in))
        elif name.endswith(".b"):
            # bias bound follows its conv's fan-in
            prev = out[-1]
            fan_in = prev.shape[1] * prev.shape[2] * prev.shape[3]
            out.append(rng.uniform(-1, 1, size=shape) / np.sqrt(fan_in))
        elif name.endswith(".gamma"):
            out.append(np.ones(shape))
        else:
            out.append(np.zeros(shape))
    return out


def run_forward(config: NetworkConfig, params: Sequence[Tensor], x: Tensor) -> Tensor:
    """Pure function from (parameters, input) to the raw network output."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"network input must be (N, C, H, W), got {x.shape}")
    if x.shape[1] != config.in_channels:
        raise ShapeError(
            f"network expects {config.in_channels} input channels, got {x.shape[1]}")
    expected = len(parameter_shapes(config))
    if len(params) != expected:
        raise ShapeError(f"network takes {expected} parameter tensors, got {len(params)}")

    it = iter(params)
    nxt = lambda: next(it)
    h = ad.relu(ad.instance_norm(ad.conv2d(x, nxt(), nxt()), nxt(), nxt()))
    for _ in range(config.n_residual_blocks):
        y = ad.relu(ad.instance_norm(ad.conv2d(h, nxt(), nxt()), nxt(), nxt()))
        y = ad.instance_norm(ad.conv2d(y, nxt(), nxt()), nxt(), nxt())
        h = ad.relu(ad.add(h, y))
    return ad.conv2d(h, nxt(), nxt())


def apply_out_activations(config: NetworkConfig, raw: Tensor) -> Tensor:
    outs = [act.apply(ad.narrow(raw, 1, i, 1))
            for i, act in enumerate(config.out_activations)]
    return outs[0] if len(outs) == 1 else ad.concat(outs, axis=1)


class MappingNetwork:
    """Owns the parameter tensors; forward/predict delegate to the pure
    functions above so the same wiring can be driven with substituted
    parameters (e.g. by finite-difference checks)."""

    def __init__(self, config: NetworkConfig, seed: int = 0):
        self.config = config
        self._names = [name for name, _ in parameter_shapes(config)]
        self.params = [Tensor(a, requires_grad=True)
                       for a in init_parameters(config, seed)]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(zip(self._names, self.params))

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def forward(self, x) -> Tensor:
        return run_forward(self.config, self.params, x)

    def predict(self, x) -> Tensor:
        """Forward pass with per-channel output activations applied."""
        return apply_out_activations(self.config, self.forward(x))


def build_network(config: NetworkConfig, seed: int = 0) -> MappingNetwork:
    return MappingNetwork(config, seed=seed)
