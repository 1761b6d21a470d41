"""Adam optimizer over autodiff leaf tensors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import QfitError


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 < self.lr):
            raise QfitError(f"Adam lr must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise QfitError("Adam betas must lie in [0, 1)")


class Adam:
    """Bias-corrected Adam. ``step`` consumes the ``grad`` fields that
    ``autodiff.backward`` deposits on the parameters."""

    def __init__(self, params: list[Tensor], config: AdamConfig | None = None):
        if not params:
            raise QfitError("Adam needs at least one parameter")
        self.params = list(params)
        self.config = config or AdamConfig()
        self.reset()

    def reset(self) -> None:
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        cfg = self.config
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise QfitError(
                    "Adam.step called with a parameter that has no gradient; "
                    "run backward first")
            g = p.grad
            m = self._m[i]
            v = self._v[i]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            p.data -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
