"""Command-line entry points.

Exit codes: 0 success, 2 configuration/usage error, 3 numerical failure
during integration or analysis, 4 oracle-check tolerance violation.
Every run writes its tables as CSV (9 significant digits), the resolved
configuration, and a manifest with the config hash and solver statistics.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np

from .analysis import AnalysisError
from .config import (ConfigBundle, ConfigError, RunManifest, Stopwatch,
                     build_config, emit_config, load_config, set_key)
from .cumulant import CumulantModel
from .experiments import (ExperimentError, lineshape_scan, lock_loop,
                          recycle_run, run_trace, threshold_scan)
from .grid import ClusterGrid, GridError
from .integrator import NumericalError, integrate
from .oracle import OracleError, OracleSystem, evolve_density, product_density
from .params import PhysicalParams
from .pulses import PulseSequence, Segment, SequenceError


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.8e}"


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _stats_dict(stats) -> dict:
    return {"steps": stats.steps, "rejected": stats.rejected,
            "rhs_evals": stats.rhs_evals}


# ----- commands ----------------------------------------------------------

def _cmd_trace(bundle: ConfigBundle, out: Path, manifest: RunManifest) -> int:
    traj, metrics = run_trace(bundle.experiment)
    ch = traj.channels
    rows = zip(traj.times, ch["photon_rate"].real, ch["intracavity_photons"].real,
               ch["mean_inversion"].real, ch["collective_coherence"].real,
               ch["total_excitation"].real)
    path = out / "trace.csv"
    _write_csv(path, ["t_s", "photon_rate_per_s", "intracavity_photons",
                      "mean_inversion", "collective_coherence",
                      "total_excitation"], rows)
    manifest.add_output(path)
    manifest.integrator = _stats_dict(traj.stats)
    manifest.summary = {
        "peak_rate_per_s": metrics.peak_rate, "peak_time_s": metrics.peak_time,
        "delay_s": metrics.delay, "area_photons": metrics.area,
    }
    print(f"peak {metrics.peak_rate:.4e} /s at {metrics.peak_time * 1e6:.3f} us, "
          f"{metrics.area:.4e} photons emitted")
    return 0


def _cmd_threshold(bundle: ConfigBundle, out: Path, manifest: RunManifest) -> int:
    areas = bundle.pulse_areas_over_pi
    lengths = (None if areas is None
               else np.sort(areas) * math.pi / bundle.experiment.params.rabi)
    scan = threshold_scan(bundle.experiment, lengths)
    path = out / "threshold.csv"
    rows = [
        (t_p, s2, m.peak_rate, m.area, m.delay, int(m.burst), m.peak_time,
         m.peak_rate / scan.pi_peak, m.area / scan.pi_area)
        for t_p, s2, m in zip(scan.pulse_lengths, scan.sin2_proxy, scan.metrics)
    ]
    _write_csv(path, ["t_P_s", "sin2_proxy", "peak_rate_per_s", "area_photons",
                      "delay_s", "burst_flag", "peak_time_s", "peak_rate_norm",
                      "area_norm"], rows)
    manifest.add_output(path)
    fit = scan.threshold
    manifest.summary = {
        "sin2_threshold": fit.sin2, "pulse_area_over_pi": fit.pulse_area_over_pi,
        "n_dark": fit.n_dark, "n_burst": fit.n_burst, "floor_per_s": scan.floor,
    }
    print(f"threshold: sin^2 = {fit.sin2:.4f}  (pulse area {fit.pulse_area_over_pi:.4f} pi), "
          f"{fit.n_dark} dark / {fit.n_burst} burst points")
    return 0


def _cmd_lineshape(bundle: ConfigBundle, out: Path, manifest: RunManifest) -> int:
    scan = lineshape_scan(bundle.experiment, bundle.detunings_hz)
    path = out / "lineshape.csv"
    rows = [
        (d, m.peak_rate, m.area, int(m.burst), m.delay, m.peak_time, ref)
        for d, m, ref in zip(scan.detunings, scan.metrics,
                             scan.reference_population)
    ]
    _write_csv(path, ["delta_a_hz", "peak_rate_per_s", "area_photons",
                      "burst_flag", "delay_s", "peak_time_s",
                      "reference_population"], rows)
    manifest.add_output(path)
    f = scan.fringe
    manifest.summary = {
        "fringe_spacing_hz": f.fringe_spacing, "envelope_width_hz": f.envelope_width,
        "zero_zone_fraction": f.zero_zone_fraction,
        "n_kinks": len(f.kink_positions), "floor_per_s": scan.floor,
    }
    print(f"fringes: spacing {f.fringe_spacing / 1e3:.2f} kHz, envelope "
          f"{f.envelope_width / 1e6:.3f} MHz, dark fraction {f.zero_zone_fraction:.3f}")
    return 0


def _cmd_lock(bundle: ConfigBundle, out: Path, manifest: RunManifest) -> int:
    lineshape = (None if bundle.detunings_hz is None
                 else lineshape_scan(bundle.experiment, bundle.detunings_hz,
                                     with_fringe_metrics=False))
    record = lock_loop(bundle.experiment, lineshape=lineshape)
    p1 = out / "lock_pulses.csv"
    _write_csv(p1, ["pulse", "commanded_hz", "true_offset_hz",
                    "peak_rate_per_s", "atom_number"],
               [(k, record.commanded_hz[k], record.true_offset_hz[k],
                 record.peaks[k], record.atom_numbers[k])
                for k in range(record.commanded_hz.size)])
    p2 = out / "lock_pairs.csv"
    _write_csv(p2, ["pair", "fl", "correction_hz", "center_hz"],
               [(k, record.fl_values[k], record.corrections_hz[k],
                 record.center_hz[k])
                for k in range(record.center_hz.size)])
    manifest.add_output(p1)
    manifest.add_output(p2)
    manifest.summary = {
        "residual_mean_hz": record.residual_mean_hz,
        "residual_std_hz": record.residual_std_hz,
        "n_excluded_pairs": record.n_excluded_pairs,
    }
    print(f"lock: residual {record.residual_mean_hz:+.2f} +/- "
          f"{record.residual_std_hz:.2f} Hz over the settled half "
          f"({record.n_excluded_pairs} excluded pairs)")
    return 0


def _cmd_recycle(bundle: ConfigBundle, out: Path, manifest: RunManifest) -> int:
    run = recycle_run(bundle.experiment, bundle.n_sequences)
    path = out / "recycle.csv"
    _write_csv(path, ["t_s", "atom_number", "peak_rate_per_s"],
               zip(run.times, run.atom_numbers, run.peaks))
    manifest.add_output(path)
    manifest.summary = {
        "mode": run.mode, "tau_loss_s": run.tau_loss,
        "scaling_exponent": run.scaling_exponent,
    }
    print(f"recycle [{run.mode}]: {run.times.size} cycles, "
          f"N {run.atom_numbers[0]:.3e} -> {run.atom_numbers[-1]:.3e}, "
          f"tau {run.tau_loss * 1e3:.0f} ms")
    return 0


_ORACLE_TOL = 0.15


def _cmd_oracle_check(bundle: ConfigBundle, out: Path,
                      manifest: RunManifest) -> int:
    """Two equally coupled atoms, strong coupling, free superradiant decay:
    the closed equations against the exact density-matrix evolution."""
    kappa = 2.0 * math.pi * 780e3
    g = 2.5 * kappa / (2.0 * math.sqrt(2.0))   # oscillatory: 2 g sqrt(2) / kappa = 2.5
    params = PhysicalParams(kappa=kappa, gamma=1.0 / 22e-6, g_max=g,
                            n_atoms=2.0, rabi=2.0 * math.pi * 833.333e3)
    theta = 0.75 * math.pi
    seq = PulseSequence((Segment(duration=3e-6),), sample_dt=5e-9)
    times = np.arange(0.0, seq.total_duration + seq.sample_dt / 2, seq.sample_dt)

    grid = ClusterGrid(g=np.array([g, g]), doppler=np.zeros(2),
                       multiplicity=np.ones(2))
    model = CumulantModel(params, grid)
    traj = integrate(model.rhs, model.initial_state(theta=theta), seq,
                     bundle.experiment.integrator, observer=model.observer())

    system = OracleSystem(params, n_atoms=2, fock_cutoff=12, seq=seq)
    rho0 = product_density(system, theta=theta)
    exact = evolve_density(system, rho0, sample_times=times)

    rate_c = traj.channels["photon_rate"].real
    t_x = np.array([t for t, _ in exact])
    rate_x = np.array([obs.photon_rate for _, obs in exact])
    ic, ix = int(np.argmax(rate_c)), int(np.argmax(rate_x))
    d_peak = abs(rate_c[ic] - rate_x[ix]) / rate_x[ix]
    d_time = abs(traj.times[ic] - t_x[ix]) / max(t_x[ix], seq.sample_dt)
    manifest.summary = {
        "peak_rate_rel_diff": d_peak, "peak_time_rel_diff": d_time,
        "tolerance": _ORACLE_TOL,
    }
    print(f"oracle check: peak rate differs by {d_peak * 100:.2f} %, "
          f"peak time by {d_time * 100:.2f} % (tolerance {_ORACLE_TOL * 100:.0f} %)")
    if d_peak > _ORACLE_TOL or d_time > _ORACLE_TOL:
        print("oracle check FAILED", file=sys.stderr)
        return 4
    return 0


_COMMANDS = {
    "trace": _cmd_trace,
    "threshold-scan": _cmd_threshold,
    "lineshape": _cmd_lineshape,
    "lock": _cmd_lock,
    "recycle": _cmd_recycle,
    "oracle-check": _cmd_oracle_check,
}


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML configuration file")
    common.add_argument("--out", metavar="DIR", default=".",
                        help="output directory (created if missing)")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        dest="overrides", help="override a configuration key "
                        "(dotted path, repeatable)")
    common.add_argument("--threads", type=int, metavar="N",
                        help="worker processes for scan points")
    common.add_argument("--seed", type=int, metavar="N",
                        help="seed of the lock-loop noise generator")
    parser = argparse.ArgumentParser(
        prog="cavityramsey",
        description="Driven atom ensembles in a lossy cavity: traces, scans, "
                    "frequency lock, recycling, exact cross-check.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in _COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _assemble_bundle(args) -> ConfigBundle:
    if args.config is not None:
        bundle = load_config(args.config)
        data = bundle.raw
    else:
        data = {}
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set needs KEY=VALUE, got {item!r}")
        set_key(data, key.strip(), value.strip())
    if args.threads is not None:
        set_key(data, "threads", str(args.threads))
    if args.seed is not None:
        set_key(data, "lock.rng_seed", str(args.seed))
    return build_config(data)


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        bundle = _assemble_bundle(args)
    except (ConfigError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"cannot create output directory: {exc}", file=sys.stderr)
        return 2

    manifest = RunManifest(command=args.command, config_hash=bundle.hash,
                           defaulted_keys=bundle.defaulted)
    try:
        with Stopwatch() as watch:
            code = _COMMANDS[args.command](bundle, out, manifest)
    except (NumericalError, OracleError, ExperimentError, AnalysisError,
            GridError, SequenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    (out / "config.yaml").write_text(emit_config(bundle))
    manifest.add_output(out / "config.yaml")
    manifest.wall_time_s = watch.elapsed
    manifest.write(out / "manifest.json")
    return code


if __name__ == "__main__":
    sys.exit(main())
