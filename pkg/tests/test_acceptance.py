"""Release gate: nine end-to-end guarantees, one test each.

Every test prints a single pass/fail line with the measured figure next
to its threshold, then asserts. Budgets are wall-clock seconds on one
CPU core. The two experiment criteria run the full desk-scale recipes
and are the long poles of the suite.
"""

import time

import numpy as np

from oracles import isochromat_fisp, mono_exp_direct
from qfit.baselines import dict_match_full, loglinear_fit, varpro_fit
from qfit.cli import main as cli_main
from qfit.experiments import (MrfExperimentConfig, NoiseExperimentConfig,
                              run_mrf_experiment, run_noise_experiment)
from qfit.losses import SsimConfig
from qfit.network import NetworkConfig, linear_activations
from qfit.signal_models import (Dictionary, EchoProtocol, default_schedule,
                                epg_fisp, generate_dictionary, synth_stack)
from qfit.subspace import (compress_atoms, compress_dictionary,
                           match_compressed, project, synth_timeseries)
from qfit.training import (TrainConfig, default_relaxometry_network,
                           train_mrf, train_relaxometry)
from qfit.verification import run_verification


def _report(num: int, label: str, ok: bool, detail: str) -> None:
    print(f"criterion {num} [{label}]: {'PASS' if ok else 'FAIL'} — {detail}",
          flush=True)
    assert ok, f"criterion {num} [{label}]: {detail}"


# -- 1: gradient integrity ---------------------------------------------------

def test_criterion_1_gradient_integrity():
    t0 = time.perf_counter()
    report = run_verification(seed=0, rtol=1e-5)
    dt = time.perf_counter() - t0
    ok = report.passed and report.max_rel_err < 1e-5 and dt < 60
    _report(1, "gradient integrity", ok,
            f"{len(report.results)} checks, max rel err "
            f"{report.max_rel_err:.2e} < 1e-05, {dt:.1f}s < 60s")


# -- 2: noiseless exactness --------------------------------------------------

def test_criterion_2_noiseless_exactness():
    t0 = time.perf_counter()
    worst = 0.0
    for proto in (EchoProtocol.t2_mapping_10echo(),
                  EchoProtocol.t2star_mapping_4echo()):
        for m0 in np.linspace(0.2, 2.0, 20):
            for t2 in np.geomspace(10.0, 500.0, 20):
                signal = mono_exp_direct(m0, t2, proto.te_ms)
                for fit in (varpro_fit(signal, proto),
                            loglinear_fit(signal, proto)):
                    assert fit.converged
                    worst = max(worst, abs(fit.t2_ms - t2) / t2,
                                abs(fit.m0 - m0) / m0)
    dt = time.perf_counter() - t0
    ok = worst < 1e-3 and dt < 60
    _report(2, "noiseless exactness", ok,
            f"2 protocols x 20x20 sweep, max rel err {worst:.2e} < 1e-03, "
            f"{dt:.1f}s < 60s")


# -- 3: transient-model fidelity ---------------------------------------------

def test_criterion_3_epg_fidelity():
    t0 = time.perf_counter()
    schedule = default_schedule(200)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        t1 = rng.uniform(150.0, 2800.0)
        t2 = rng.uniform(20.0, min(300.0, t1))
        fast = epg_fisp(t1, t2, schedule)
        slow = isochromat_fisp(t1, t2, schedule.flip_deg, schedule.tr_ms,
                               schedule.te_ms, inversion=schedule.inversion,
                               inv_delay_ms=schedule.inv_delay_ms,
                               n_spins=2000)
        worst = max(worst, np.linalg.norm(fast - slow) / np.linalg.norm(slow))
    dt = time.perf_counter() - t0
    ok = worst < 1e-2 and dt < 300
    _report(3, "transient-model fidelity", ok,
            f"20 tissue pairs vs 2000-spin reference, max rel L2 "
            f"{worst:.2e} < 1e-02, {dt:.1f}s < 300s")


# -- 4: subspace selection rule ----------------------------------------------

def test_criterion_4_subspace_rule():
    schedule = default_schedule(200)
    dictionary = generate_dictionary(np.arange(100.0, 3000.0 + 1, 100.0),
                                     np.arange(10.0, 300.0 + 1, 10.0),
                                     schedule)
    basis = compress_dictionary(dictionary, energy_target=0.95)

    # independent minimal-rank computation from the raw spectrum
    s = np.linalg.svd(dictionary.atoms_unit, compute_uv=False)
    energy = np.cumsum(s**2) / np.sum(s**2)
    k_min = int(np.searchsorted(energy, 0.95) + 1)
    minimal = basis.rank == k_min and (basis.rank == 1
                                       or energy[basis.rank - 2] < 0.95)

    recon = synth_timeseries(project(dictionary.atoms_unit, basis), basis)
    frob_resid = np.sum(np.abs(dictionary.atoms_unit - recon) ** 2)
    frob_total = np.sum(np.abs(dictionary.atoms_unit) ** 2)
    bound = frob_resid <= 0.05 * frob_total

    # exactly rank-2 synthetic dictionary with balanced components
    rng = np.random.default_rng(1)
    q, _ = np.linalg.qr(rng.standard_normal((schedule.n_tr, 2))
                        + 1j * rng.standard_normal((schedule.n_tr, 2)))
    theta = np.linspace(0.1, np.pi / 2 - 0.1, 50)
    atoms = (np.cos(theta)[:, None] * q[:, 0]
             + np.sin(theta)[:, None] * q[:, 1])
    norms = np.linalg.norm(atoms, axis=1)
    synthetic = Dictionary(atoms=atoms, atoms_unit=atoms / norms[:, None],
                           norms=norms, t1_ms=np.full(50, 1000.0),
                           t2_ms=np.full(50, 100.0),
                           t1_grid=np.array([1000.0]),
                           t2_grid=np.array([100.0]), schedule=schedule)
    rank2 = compress_dictionary(synthetic, energy_target=0.95).rank == 2

    ok = minimal and bound and rank2
    _report(4, "subspace selection rule", ok,
            f"minimal rank {basis.rank} (independent: {k_min}), Frobenius "
            f"residual {frob_resid / frob_total:.4f} <= 0.05, "
            f"rank-2 synthetic -> K=2: {rank2}")


# -- 5: matching consistency -------------------------------------------------

def test_criterion_5_matching_consistency():
    schedule = default_schedule(600)
    dictionary = generate_dictionary(np.arange(100.0, 3000.0 + 1, 60.0),
                                     np.arange(10.0, 300.0 + 1, 6.0),
                                     schedule)
    basis = compress_dictionary(dictionary, energy_target=0.999)
    cdict = compress_atoms(dictionary, basis)

    def agrees(signal: np.ndarray) -> bool:
        full = dict_match_full(signal, dictionary)
        fast = match_compressed(project(signal, basis), cdict)
        return fast.index == full.index

    clean_hits = sum(agrees(a) for a in dictionary.atoms)
    clean_frac = clean_hits / dictionary.n_atoms

    rng = np.random.default_rng(5)
    picks = rng.integers(0, dictionary.n_atoms, size=1000)
    noisy_hits = 0
    for idx in picks:
        atom = dictionary.atoms[idx]
        # amplitude SNR 20: rms of |noise| is rms(|atom|)/20
        sigma = np.sqrt(np.mean(np.abs(atom) ** 2)) / (20.0 * np.sqrt(2.0))
        noise = rng.normal(scale=sigma, size=(atom.size, 2))
        noisy_hits += agrees(atom + noise[:, 0] + 1j * noise[:, 1])
    noisy_frac = noisy_hits / 1000.0

    ok = clean_frac >= 0.99 and noisy_frac >= 0.99
    _report(5, "matching consistency", ok,
            f"compressed vs full-length matching at rank {basis.rank}: "
            f"{clean_frac:.1%} of {dictionary.n_atoms} noiseless atoms, "
            f"{noisy_frac:.1%} of 1000 SNR-20 atoms (both >= 99%)")


# -- 6: noise-robustness experiment -------------------------------------------

def test_criterion_6_noise_robustness_experiment():
    t0 = time.perf_counter()
    report = run_noise_experiment(NoiseExperimentConfig())
    dt = time.perf_counter() - t0
    ratio = report.summary["rmse_t2_ms_ratio_varpro_over_network"]
    net = report.summary["mean"]["network"]["rmse_t2_ms"]
    var = report.summary["mean"]["varpro"]["rmse_t2_ms"]
    ok = ratio >= 2.0 and dt <= 1800
    _report(6, "noise-robustness experiment", ok,
            f"t2 rmse varpro {var:.2f} ms vs network {net:.2f} ms, raw "
            f"ratio {ratio:.2f} >= 2.0, {dt:.0f}s <= 1800s")


# -- 7: accelerated-acquisition experiment ------------------------------------

def test_criterion_7_mrf_experiment():
    t0 = time.perf_counter()
    report = run_mrf_experiment(MrfExperimentConfig())
    dt = time.perf_counter() - t0
    r1 = report.summary["rmse_t1_ms_ratio_baseline_over_network"]
    r2 = report.summary["rmse_t2_ms_ratio_baseline_over_network"]
    ok = r1 >= 1.1 and r2 >= 1.1 and dt <= 3600
    _report(7, "accelerated-acquisition experiment", ok,
            f"raw ratios t1 {r1:.2f}, t2 {r2:.2f} (both >= 1.1), "
            f"{dt:.0f}s <= 3600s")


# -- 8: byte determinism -----------------------------------------------------

def test_criterion_8_determinism(tmp_path):
    overrides = [
        "experiments.noise.shape=[20,20]", "experiments.noise.seeds=[0]",
        "experiments.noise.iterations=4", "experiments.noise.base_width=8",
        "experiments.noise.n_residual_blocks=1",
    ]
    outputs = []
    for tag in ("a", "b"):
        json_path = tmp_path / f"report_{tag}.json"
        csv_path = tmp_path / f"rows_{tag}.csv"
        args = ["experiment-noise", "--out-json", str(json_path),
                "--out-csv", str(csv_path)]
        for ov in overrides:
            args += ["--set", ov]
        assert cli_main(args) == 0
        outputs.append((json_path.read_bytes(), csv_path.read_bytes()))
    reports_equal = outputs[0] == outputs[1]

    # container round: identical train runs must serialize identically
    train_args = ["--set", "phantom.shape=[20,20]",
                  "--set", "relaxometry.network.base_width=8",
                  "--set", "relaxometry.network.n_residual_blocks=1",
                  "--set", "relaxometry.training.iterations=3"]
    map_bytes = []
    for tag in ("a", "b"):
        phantom_path = tmp_path / f"phantom_{tag}.qfit"
        stack = tmp_path / f"stack_{tag}.qfit"
        maps = tmp_path / f"maps_{tag}.qfit"
        assert cli_main(["phantom", "--out", str(phantom_path)]
                        + train_args) == 0
        assert cli_main(["simulate", "--mode", "relax", "--phantom",
                         str(phantom_path), "--out", str(stack)]
                        + train_args) == 0
        assert cli_main(["train-relax", "--in", str(stack), "--out",
                         str(maps)] + train_args) == 0
        map_bytes.append(maps.read_bytes())
    containers_equal = map_bytes[0] == map_bytes[1]

    ok = reports_equal and containers_equal
    _report(8, "byte determinism", ok,
            f"reports identical: {reports_equal}, trained-map containers "
            f"identical: {containers_equal}")


# -- 9: self-consistency -----------------------------------------------------

def test_criterion_9_self_consistency():
    # relaxometry on data generated exactly by the forward model
    rng = np.random.default_rng(2)
    h = w = 20
    t2 = np.full((h, w), 60.0)
    t2[:, w // 2:] = 140.0
    m0 = 0.8 + 0.2 * np.cos(np.linspace(0, np.pi, w))[None, :].repeat(h, 0)
    proto = EchoProtocol.t2_mapping_10echo()
    stack = synth_stack(m0, t2, proto)
    cfg = default_relaxometry_network(10, base_width=8, n_residual_blocks=2)
    relax = train_relaxometry(stack, proto, net_config=cfg,
                              train_config=TrainConfig(lr=5e-3, iterations=500,
                                                       seed=0),
                              ssim_config=SsimConfig(dynamic_range=1.0,
                                                     window_size=7))
    relax_ok = relax.best_loss < 0.01

    # subspace route on data exactly inside the span of the basis
    sched = default_schedule(150)
    d = generate_dictionary(np.arange(200.0, 2000.0 + 1, 300.0),
                            np.arange(20.0, 200.0 + 1, 30.0), sched)
    basis = compress_dictionary(d, energy_target=0.95)
    picks = rng.choice(d.n_atoms, size=4, replace=False)
    labels = np.empty((h, w), dtype=np.int64)
    labels[:h // 2, :w // 2] = picks[0]
    labels[:h // 2, w // 2:] = picks[1]
    labels[h // 2:, :w // 2] = picks[2]
    labels[h // 2:, w // 2:] = picks[3]
    yy, xx = np.mgrid[0:h, 0:w]
    amp = 0.8 + 0.4 * np.sin(2 * np.pi * xx / w) * np.cos(np.pi * yy / h)
    coeff_true = project(amp[..., None] * d.atoms[labels], basis)
    stack_mrf = np.moveaxis(synth_timeseries(coeff_true, basis), -1, 0)
    mrf_net = NetworkConfig(in_channels=2 * basis.rank,
                            out_channels=2 * basis.rank, base_width=8,
                            n_residual_blocks=2,
                            out_activations=linear_activations(2 * basis.rank))
    mrf = train_mrf(stack_mrf, basis, net_config=mrf_net,
                    train_config=TrainConfig(lr=3e-3, iterations=1500, seed=0))
    coeff_err = (np.sqrt(np.mean(np.abs(mrf.coeff_maps - coeff_true) ** 2))
                 / np.sqrt(np.mean(np.abs(coeff_true) ** 2)))
    mrf_ok = coeff_err < 0.01

    ok = relax_ok and mrf_ok
    _report(9, "self-consistency", ok,
            f"relaxometry best loss {relax.best_loss:.4f} < 0.01, "
            f"subspace coefficient rms error {coeff_err:.2%} < 1%")
