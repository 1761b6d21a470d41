"""Command-line front end.

Every subcommand is a thin wrapper over the library: read containers,
call one pipeline function, write containers or report files. Exit
codes: 0 on success, 1 on runtime failures (bad data, IO, diverged
training; a JSON error record goes to stderr), 2 on unknown flags or
subcommands, 3 on configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from types import SimpleNamespace

import numpy as np

from .baselines import fit_volume
from .config import (config_hash, grids_from_config, load_config,
                     mrf_network_from_config, protocol_from_config,
                     relax_network_from_config, schedule_from_config,
                     train_config_from_config)
from .containers import export_map_png, read_container, write_container
from .errors import ConfigError, QfitError
from .experiments import (MrfExperimentConfig, NoiseExperimentConfig,
                          run_mrf_experiment, run_noise_experiment,
                          simulate_phantom_series)
from .phantom import (add_gaussian_noise, default_brain_spec, make_phantom,
                      mrf_brain_spec, undersample_frames)
from .signal_models import EchoProtocol, generate_dictionary, synth_stack
from .subspace import (CompressedDictionary, SubspaceBasis, compress_atoms,
                       compress_dictionary, match_compressed_volume, project)
from .training import train_mrf, train_relaxometry

log = logging.getLogger("qfit")


def _stamp(config: dict, extra: dict | None = None) -> dict:
    meta = {"config_hash": config_hash(config)}
    if extra:
        meta.update(extra)
    return meta


def _read_entry(path, name: str) -> np.ndarray:
    box = read_container(path)
    if name not in box.entries:
        raise ConfigError(
            f"{path} has no entry {name!r}; it holds {sorted(box.entries)}")
    return box[name]


def _protocol_for_stack(box, config: dict) -> EchoProtocol:
    """Prefer the protocol recorded with the stack; fall back to config."""
    rec = box.meta.get("protocol")
    if rec is not None:
        return EchoProtocol(te_first_ms=rec["te_first_ms"],
                            te_step_ms=rec["te_step_ms"],
                            n_echoes=int(rec["n_echoes"]))
    return protocol_from_config(config)


def _phantom_spec(config: dict):
    p = config["phantom"]
    shape = tuple(int(s) for s in p["shape"])
    if p["variant"] == "default":
        return default_brain_spec(shape=shape, variation=float(p["variation"]),
                                  seed=int(p["seed"]))
    if p["variant"] == "mrf":
        return mrf_brain_spec(shape=shape, variation=float(p["variation"]),
                              seed=int(p["seed"]))
    raise ConfigError(f"unknown phantom variant {p['variant']!r}")


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def cmd_phantom(args, config) -> int:
    phantom = make_phantom(_phantom_spec(config))
    write_container(args.out, {
        "m0": phantom.m0, "t1_ms": phantom.t1_ms, "t2_ms": phantom.t2_ms,
        "mask": phantom.mask, "labels": phantom.labels.astype(np.int64),
    }, meta=_stamp(config, {"kind": "phantom"}),
       units={"t1_ms": "ms", "t2_ms": "ms"})
    log.info("wrote phantom maps to %s", args.out)
    return 0


def cmd_simulate(args, config) -> int:
    box = read_container(args.phantom)
    for need in ("m0", "t1_ms", "t2_ms", "mask"):
        if need not in box.entries:
            raise ConfigError(f"{args.phantom} lacks phantom entry {need!r}")
    if args.mode == "relax":
        proto = protocol_from_config(config)
        stack = synth_stack(box["m0"], box["t2_ms"], proto, box["mask"])
        meta = _stamp(config, {"kind": "echo_stack",
                               "protocol": {"te_first_ms": proto.te_first_ms,
                                            "te_step_ms": proto.te_step_ms,
                                            "n_echoes": proto.n_echoes}})
    else:
        schedule = schedule_from_config(config)
        phantom = SimpleNamespace(m0=box["m0"], t1_ms=box["t1_ms"],
                                  t2_ms=box["t2_ms"], mask=box["mask"])
        stack = simulate_phantom_series(phantom, schedule)
        meta = _stamp(config, {"kind": "transient_series",
                               "schedule": schedule.to_dict()})
    write_container(args.out, {"stack": stack, "mask": box["mask"]}, meta=meta)
    log.info("wrote %s frames to %s", stack.shape[0], args.out)
    return 0


def cmd_noise(args, config) -> int:
    box = read_container(args.input)
    variance = float(config["noise"]["variance"])
    seed = int(config["noise"]["seed"])
    noisy = add_gaussian_noise(box["stack"], variance, seed)
    meta = dict(box.meta)
    meta.update(_stamp(config, {"noise_variance": variance,
                                "noise_seed": seed}))
    entries = dict(box.entries)
    entries["stack"] = noisy
    write_container(args.out, entries, meta=meta, units=box.units)
    log.info("added variance %g noise (seed %d)", variance, seed)
    return 0


def cmd_undersample(args, config) -> int:
    box = read_container(args.input)
    u = config["undersampling"]
    aliased = undersample_frames(box["stack"], int(u["acceleration"]),
                                 seed=int(u["seed"]),
                                 center_lines=int(u["center_lines"]))
    meta = dict(box.meta)
    meta.update(_stamp(config, {"acceleration": int(u["acceleration"]),
                                "undersampling_seed": int(u["seed"])}))
    entries = dict(box.entries)
    entries["stack"] = aliased
    write_container(args.out, entries, meta=meta, units=box.units)
    log.info("kept one in %s phase-encode lines", u["acceleration"])
    return 0


def cmd_fit(args, config) -> int:
    box = read_container(args.input)
    proto = _protocol_for_stack(box, config)
    method = args.method or config["fit"]["method"]
    mask = box.entries.get("mask")
    maps = fit_volume(np.asarray(box["stack"], dtype=np.float64), proto,
                      method=method, mask=mask)
    write_container(args.out, {
        "m0": maps.m0, "t2_ms": maps.t2_ms, "residual": maps.residual,
        "valid": maps.valid,
    }, meta=_stamp(config, {"kind": "parameter_maps", "method": method}),
       units={"t2_ms": "ms"})
    log.info("fit %s voxels with %s", int(maps.valid.sum()), method)
    return 0


def cmd_dict(args, config) -> int:
    schedule = schedule_from_config(config)
    t1_grid, t2_grid = grids_from_config(config)
    d = generate_dictionary(t1_grid, t2_grid, schedule)
    write_container(args.out, {
        "atoms": d.atoms, "t1_ms": d.t1_ms, "t2_ms": d.t2_ms,
        "flip_deg": schedule.flip_deg,
    }, meta=_stamp(config, {"kind": "dictionary",
                            "schedule": schedule.to_dict()}),
       units={"t1_ms": "ms", "t2_ms": "ms", "flip_deg": "deg"})
    log.info("simulated %d atoms x %d timepoints", *d.atoms.shape)
    return 0


def cmd_compress(args, config) -> int:
    from .signal_models import Dictionary, FispSchedule
    box = read_container(args.dictionary)
    sched_rec = box.meta.get("schedule")
    if sched_rec is None:
        raise ConfigError(f"{args.dictionary} lacks the schedule record")
    schedule = FispSchedule(flip_deg=box["flip_deg"],
                            tr_ms=float(sched_rec["tr_ms"]),
                            te_ms=float(sched_rec["te_ms"]),
                            inversion=bool(sched_rec["inversion"]),
                            inv_delay_ms=float(sched_rec["inv_delay_ms"]))
    atoms = box["atoms"]
    norms = np.linalg.norm(atoms, axis=1)
    d = Dictionary(atoms=atoms, atoms_unit=atoms / norms[:, None], norms=norms,
                   t1_ms=box["t1_ms"], t2_ms=box["t2_ms"],
                   t1_grid=np.unique(box["t1_ms"]),
                   t2_grid=np.unique(box["t2_ms"]), schedule=schedule)
    energy = float(config["mrf"]["subspace"]["energy_target"])
    basis = compress_dictionary(d, energy_target=energy)
    cdict = compress_atoms(d, basis)
    write_container(args.out, {
        "phi": basis.phi, "singular_values": basis.singular_values,
        "coeffs": cdict.coeffs, "norms": cdict.norms,
        "t1_ms": cdict.t1_ms, "t2_ms": cdict.t2_ms,
    }, meta=_stamp(config, {"kind": "subspace",
                            "energy_target": basis.energy_target,
                            "retained_energy": basis.retained_energy,
                            "rank": basis.rank}),
       units={"t1_ms": "ms", "t2_ms": "ms"})
    log.info("rank %d basis retains %.4f of signal energy",
             basis.rank, basis.retained_energy)
    return 0


def _load_subspace(path):
    box = read_container(path)
    basis = SubspaceBasis(phi=box["phi"],
                          singular_values=box["singular_values"],
                          energy_target=float(box.meta["energy_target"]),
                          retained_energy=float(box.meta["retained_energy"]))
    coeffs = box["coeffs"]
    norms = box["norms"]
    cdict = CompressedDictionary(coeffs=coeffs,
                                 coeffs_unit=coeffs / norms[:, None],
                                 norms=norms, t1_ms=box["t1_ms"],
                                 t2_ms=box["t2_ms"], basis=basis)
    return basis, cdict


def cmd_match(args, config) -> int:
    basis, cdict = _load_subspace(args.subspace)
    box = read_container(args.input)
    series = np.moveaxis(np.asarray(box["stack"], dtype=np.complex128), 0, -1)
    coeffs = project(series, basis)
    mask = box.entries.get("mask")
    matched = match_compressed_volume(coeffs, cdict, mask=mask)
    write_container(args.out, {
        "t1_ms": matched["t1_ms"], "t2_ms": matched["t2_ms"],
        "m0": np.abs(matched["scale"]), "correlation": matched["correlation"],
        "valid": matched["valid"],
    }, meta=_stamp(config, {"kind": "parameter_maps", "method": "match"}),
       units={"t1_ms": "ms", "t2_ms": "ms"})
    log.info("matched %d voxels against %d atoms",
             int(matched["valid"].sum()), cdict.coeffs.shape[0])
    return 0


def cmd_train_relax(args, config) -> int:
    box = read_container(args.input)
    proto = _protocol_for_stack(box, config)
    result = train_relaxometry(np.asarray(box["stack"], dtype=np.float64),
                               proto,
                               net_config=relax_network_from_config(config),
                               train_config=train_config_from_config(
                                   config, "relaxometry"))
    write_container(args.out, {
        "m0": result.m0, "t2_ms": result.t2_ms,
        "loss_history": result.loss_history,
    }, meta=_stamp(config, {"kind": "parameter_maps", "method": "network",
                            "best_iteration": result.best_iteration,
                            "best_loss": result.best_loss,
                            "normalization": result.normalization}),
       units={"t2_ms": "ms"})
    log.info("best loss %.6f at iteration %d",
             result.best_loss, result.best_iteration)
    return 0


def cmd_train_mrf(args, config) -> int:
    basis, cdict = _load_subspace(args.subspace)
    box = read_container(args.input)
    stack = np.asarray(box["stack"], dtype=np.complex128)
    net_cfg = mrf_network_from_config(config, rank=basis.rank,
                                      n_frames=stack.shape[0])
    result = train_mrf(stack, basis, cdict=cdict, net_config=net_cfg,
                       train_config=train_config_from_config(config, "mrf"),
                       input_mode=config["mrf"]["input_mode"])
    write_container(args.out, {
        "coeff_maps": result.coeff_maps, "t1_ms": result.t1_ms,
        "t2_ms": result.t2_ms, "m0": result.m0, "valid": result.valid,
        "loss_history": result.loss_history,
    }, meta=_stamp(config, {"kind": "parameter_maps", "method": "network",
                            "best_iteration": result.best_iteration,
                            "best_loss": result.best_loss,
                            "normalization": result.normalization}),
       units={"t1_ms": "ms", "t2_ms": "ms"})
    log.info("best loss %.6f at iteration %d",
             result.best_loss, result.best_iteration)
    return 0


def _experiment_common(args, report) -> int:
    report.save_json(args.out_json)
    if args.out_csv:
        report.save_csv(args.out_csv)
    if args.out_timings:
        report.save_timings(args.out_timings)
    for key, value in sorted(report.summary.items()):
        if isinstance(value, float):
            log.info("%s = %.4f", key, value)
    log.info("wrote report to %s", args.out_json)
    return 0


def cmd_experiment_noise(args, config) -> int:
    e = config["experiments"]["noise"]
    cfg = NoiseExperimentConfig(
        shape=tuple(e["shape"]), noise_variance=float(e["noise_variance"]),
        seeds=tuple(int(s) for s in e["seeds"]),
        te_first_ms=float(e["te_first_ms"]), te_step_ms=float(e["te_step_ms"]),
        n_echoes=int(e["n_echoes"]),
        phantom_variation=float(e["phantom_variation"]),
        phantom_seed=int(e["phantom_seed"]),
        base_width=int(e["base_width"]),
        n_residual_blocks=int(e["n_residual_blocks"]),
        iterations=int(e["iterations"]), lr=float(e["lr"]))
    return _experiment_common(args, run_noise_experiment(cfg, progress=log.info))


def cmd_experiment_mrf(args, config) -> int:
    e = config["experiments"]["mrf"]
    cfg = MrfExperimentConfig(
        shape=tuple(e["shape"]), acceleration=int(e["acceleration"]),
        noise_variance=float(e["noise_variance"]),
        seeds=tuple(int(s) for s in e["seeds"]), n_tr=int(e["n_tr"]),
        energy_target=float(e["energy_target"]),
        t1_grid_ms=tuple(float(v) for v in e["t1_grid_ms"]),
        t2_grid_ms=tuple(float(v) for v in e["t2_grid_ms"]),
        phantom_variation=float(e["phantom_variation"]),
        phantom_seed=int(e["phantom_seed"]),
        base_width=int(e["base_width"]),
        n_residual_blocks=int(e["n_residual_blocks"]),
        iterations=int(e["iterations"]), lr=float(e["lr"]))
    return _experiment_common(args, run_mrf_experiment(cfg, progress=log.info))


def cmd_export(args, config) -> int:
    arr = _read_entry(args.input, args.entry)
    window = tuple(args.window) if args.window else None
    export_map_png(args.out, np.abs(arr) if np.iscomplexobj(arr) else arr,
                   window=window)
    log.info("exported %s to %s", args.entry, args.out)
    return 0


def cmd_gradcheck(args, config) -> int:
    from .verification import run_verification
    report = run_verification(seed=args.seed)
    for line in report.lines():
        print(line)
    if not report.passed:
        print("gradient verification FAILED", file=sys.stderr)
        return 1
    print(f"all gradients verified (max rel err {report.max_rel_err:.3e})")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qfit",
        description="Scan-specific quantitative parameter mapping.")
    parser.add_argument("--verbose", action="store_true",
                        help="debug-level logging")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, metavar="PATH",
                        help="JSON configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VAL",
                        help="override one configuration value (repeatable)")

    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, help_text, **parser_kw):
        p = sub.add_parser(name, parents=[common], help=help_text, **parser_kw)
        p.set_defaults(handler=handler)
        return p

    p = add("phantom", cmd_phantom, "write numerical phantom maps")
    p.add_argument("--out", required=True)

    p = add("simulate", cmd_simulate, "synthesize data from phantom maps")
    p.add_argument("--phantom", required=True)
    p.add_argument("--mode", choices=("relax", "mrf"), default="relax")
    p.add_argument("--out", required=True)

    p = add("noise", cmd_noise, "add gaussian noise to a stack")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = add("undersample", cmd_undersample,
            "retrospectively undersample a transient series")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = add("fit", cmd_fit, "classical voxelwise fitting")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--method", choices=("varpro", "loglinear"), default=None)
    p.add_argument("--out", required=True)

    p = add("dict", cmd_dict, "simulate a tissue dictionary")
    p.add_argument("--out", required=True)

    p = add("compress", cmd_compress, "build the temporal subspace")
    p.add_argument("--dict", dest="dictionary", required=True)
    p.add_argument("--out", required=True)

    p = add("match", cmd_match, "project a series and match the dictionary")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--subspace", required=True)
    p.add_argument("--out", required=True)

    p = add("train-relax", cmd_train_relax,
            "train the mapping network on one echo stack")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = add("train-mrf", cmd_train_mrf,
            "train the coefficient network on one transient series")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--subspace", required=True)
    p.add_argument("--out", required=True)

    p = add("experiment-noise", cmd_experiment_noise,
            "run the relaxometry noise study")
    p.add_argument("--out-json", required=True)
    p.add_argument("--out-csv", default=None)
    p.add_argument("--out-timings", default=None)

    p = add("experiment-mrf", cmd_experiment_mrf,
            "run the undersampling study")
    p.add_argument("--out-json", required=True)
    p.add_argument("--out-csv", default=None)
    p.add_argument("--out-timings", default=None)

    p = add("export", cmd_export, "export one map entry as PNG")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--entry", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", nargs=2, type=float, default=None,
                   metavar=("LO", "HI"))

    p = add("gradcheck", cmd_gradcheck,
            "verify analytic gradients against finite differences")
    p.add_argument("--seed", type=int, default=0)

    return parser


def _emit_error(exc: Exception) -> None:
    record = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(record), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)

    try:
        config = load_config(getattr(args, "config", None),
                             tuple(getattr(args, "set", ())))
    except (ConfigError, OSError) as e:
        _emit_error(e)
        return 3
    log.debug("resolved configuration: %s",
              json.dumps(config, sort_keys=True))
    log.info("configuration hash %s", config_hash(config))

    try:
        return args.handler(args, config)
    except ConfigError as e:
        _emit_error(e)
        return 3
    except (QfitError, OSError) as e:
        _emit_error(e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
