"""Finite-difference verification of the whole differentiable stack.

Runs a gradcheck per primitive op and one through the composed training
objective (network forward, echo synthesis, similarity loss), so a single
call certifies every gradient the training loops rely on. Shared by the
command line and the acceptance suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GradcheckResult, Tensor, gradcheck
from .losses import SsimConfig, l1_loss, ssim_loss
from .network import (NetworkConfig, init_parameters, relaxometry_activations,
                      run_forward, apply_out_activations)
from .signal_models import EchoProtocol, mono_exp_synth


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def op_checks(seed: int = 0, rtol: float = 1e-5) -> list[GradcheckResult]:
    """One finite-difference check per differentiable primitive."""
    r = _rng(seed)

    def u(*shape, lo=-1.0, hi=1.0):
        return r.uniform(lo, hi, size=shape)

    checks = []

    def run(name, f, arrays, cap=None):
        checks.append(gradcheck(f, arrays, rtol=rtol, name=name,
                                max_coords_per_input=cap, rng=_rng(seed + 1)))

    run("add", lambda a, b: ad.reduce_sum(ad.add(a, b)), [u(3, 4), u(3, 4)])
    run("add_broadcast", lambda a, b: ad.reduce_sum(ad.add(a, b)),
        [u(3, 4), u(4)])
    run("sub", lambda a, b: ad.reduce_sum(ad.sub(a, b)), [u(3, 4), u(3, 4)])
    run("mul", lambda a, b: ad.reduce_sum(ad.mul(a, b)), [u(3, 4), u(3, 4)])
    run("div", lambda a, b: ad.reduce_sum(ad.div(a, b)),
        [u(3, 4), u(3, 4, lo=0.5, hi=2.0)])
    run("neg", lambda a: ad.reduce_sum(ad.neg(a)), [u(5)])
    run("exp", lambda a: ad.reduce_sum(ad.exp(a)), [u(3, 3)])
    # keep relu and abs arguments away from their kinks
    run("relu", lambda a: ad.reduce_sum(ad.relu(a)),
        [np.where(np.abs(u(4, 4)) < 0.1, 0.5, u(4, 4))])
    run("sigmoid", lambda a: ad.reduce_sum(ad.sigmoid(a)), [u(3, 3, lo=-3, hi=3)])
    run("softplus", lambda a: ad.reduce_sum(ad.softplus(a)), [u(3, 3, lo=-3, hi=3)])
    run("reshape", lambda a: ad.reduce_sum(ad.mul(ad.reshape(a, (6, 2)),
                                                  ad.reshape(a, (6, 2)))),
        [u(3, 4)])
    run("transpose", lambda a: ad.reduce_sum(ad.mul(ad.transpose(a, (1, 0)),
                                                    ad.transpose(a, (1, 0)))),
        [u(3, 4)])
    run("concat", lambda a, b: ad.reduce_sum(
        ad.mul(ad.concat([a, b], axis=1), ad.concat([a, b], axis=1))),
        [u(2, 3), u(2, 2)])
    run("narrow", lambda a: ad.reduce_sum(ad.mul(ad.narrow(a, 1, 1, 2),
                                                 ad.narrow(a, 1, 1, 2))),
        [u(3, 4)])
    run("reduce_sum", lambda a: ad.mul(ad.reduce_sum(a), ad.reduce_sum(a)), [u(3, 4)])
    run("reduce_mean", lambda a: ad.mul(ad.reduce_mean(a), ad.reduce_mean(a)),
        [u(3, 4)])
    run("reduce_abs_mean",
        lambda a: ad.reduce_abs_mean(a),
        [np.where(np.abs(u(4, 4)) < 0.1, 0.5, u(4, 4))])
    run("matmul", lambda a, b: ad.reduce_sum(ad.matmul(a, b)),
        [u(3, 4), u(4, 2)])
    # weight the op outputs with a fixed random tensor: a plain sum (or a
    # square) of a normalized output barely depends on the input, leaving
    # a near-zero true gradient that finite differences cannot resolve
    wc = Tensor(u(2, 4, 6, 5, lo=0.5, hi=1.5))
    run("conv2d", lambda x, w, b: ad.reduce_sum(ad.mul(ad.conv2d(x, w, b), wc)),
        [u(2, 3, 6, 5), u(4, 3, 3, 3), u(4)])
    wn = Tensor(u(2, 3, 4, 5, lo=0.5, hi=1.5))
    run("instance_norm",
        lambda x, g, b: ad.reduce_sum(ad.mul(ad.instance_norm(x, g, b), wn)),
        [u(2, 3, 4, 5), u(3, lo=0.5, hi=1.5), u(3)])
    run("ssim", lambda a, b: ssim_loss(a, b, SsimConfig(dynamic_range=1.0,
                                                        window_size=3)),
        [u(1, 2, 6, 6, lo=0.1, hi=1.0), u(1, 2, 6, 6, lo=0.1, hi=1.0)])
    run("l1", lambda a, b: l1_loss(a, b),
        [u(2, 3), u(2, 3) + 0.3])
    return checks


def composed_network_check(seed: int = 0, rtol: float = 1e-5
                           ) -> GradcheckResult:
    """Gradcheck through the full relaxometry objective.

    The objective chains the residual CNN, its output activations, the
    echo-stack synthesis, and the similarity loss; the check probes a
    random subset of coordinates of every parameter and of the input.
    """
    r = _rng(seed)
    proto = EchoProtocol(6.0, 6.0, 4)
    cfg = NetworkConfig(in_channels=4, out_channels=2, base_width=6,
                        n_residual_blocks=2,
                        out_activations=relaxometry_activations(10.0, 200.0))
    params = init_parameters(cfg, seed=seed)
    x = np.abs(r.uniform(0.2, 1.0, size=(1, 4, 10, 10)))
    ssim_cfg = SsimConfig(dynamic_range=1.0, window_size=5)

    def objective(xt, *ps):
        raw = run_forward(cfg, list(ps), xt)
        out = apply_out_activations(cfg, raw)
        synth = mono_exp_synth(ad.narrow(out, 1, 0, 1), ad.narrow(out, 1, 1, 1),
                               proto)
        return ssim_loss(synth, xt, ssim_cfg)

    return gradcheck(objective, [x, *params], rtol=rtol,
                     max_coords_per_input=4, rng=_rng(seed + 1),
                     name="composed_network")


@dataclass(eq=False)
class VerificationReport:
    results: list[GradcheckResult]

    @property
    def passed(self) -> bool:
        return all(res.passed for res in self.results)

    @property
    def max_rel_err(self) -> float:
        return max(res.max_rel_err for res in self.results)

    def lines(self) -> list[str]:
        out = []
        for res in self.results:
            status = "ok " if res.passed else "FAIL"
            out.append(f"{status} {res.name:<18s} max_rel_err={res.max_rel_err:.3e} "
                       f"(n={res.n_checked})")
        return out


def run_verification(seed: int = 0, rtol: float = 1e-5) -> VerificationReport:
    results = op_checks(seed=seed, rtol=rtol)
    results.append(composed_network_check(seed=seed, rtol=rtol))
    return VerificationReport(results=results)
