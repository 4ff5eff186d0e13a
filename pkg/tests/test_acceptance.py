"""End-to-end acceptance runs at the standard operating point.

Every check prints one PASS/FAIL line (routed past pytest's capture so the
verdicts appear in the live log) and then asserts.  The decohered stack is
computed once at n_phase = 12, n_doppler = 5 — the coarsest cluster grid
whose discretization error sits far below every tolerance used here — and
shared across checks through module fixtures.
"""

import dataclasses
import math
import sys
import time

import numpy as np
import pytest
from scipy.linalg import expm

from cavityramsey.analysis import fl_calibration, linear_fit
from cavityramsey.cumulant import CumulantModel
from cavityramsey.experiments import (ExperimentConfig, LossModel,
                                      lineshape_scan, lock_loop, recycle_run,
                                      run_trace, threshold_scan)
from cavityramsey.grid import ClusterGrid, build_cluster_grid
from cavityramsey.integrator import IntegratorConfig, integrate
from cavityramsey.oracle import OracleSystem, evolve_density, product_density
from cavityramsey.params import TWO_PI, PhysicalParams, standard_params
from cavityramsey.pulses import PulseSequence, Segment


def _check(name: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}",
          file=sys.__stdout__, flush=True)
    assert ok, f"{name}: {detail}"


# ----- shared runs -------------------------------------------------------

@pytest.fixture(scope="module")
def ideal_scan():
    cfg = ExperimentConfig(params=standard_params(gamma=0.0, doppler_sigma=0.0),
                           n_phase=64, n_doppler=1, readout=40e-6,
                           loss=LossModel(survival=1.0))
    t0 = time.perf_counter()
    scan = threshold_scan(cfg)
    return scan, time.perf_counter() - t0


@pytest.fixture(scope="module")
def deco_cfg():
    return ExperimentConfig(params=standard_params(), n_phase=12, n_doppler=5,
                            readout=10e-6, loss=LossModel(survival=1.0))


@pytest.fixture(scope="module")
def deco_scan(deco_cfg):
    return threshold_scan(deco_cfg)


@pytest.fixture(scope="module")
def pi_trace(deco_cfg):
    return run_trace(deco_cfg)


@pytest.fixture(scope="module")
def deco_lineshape(deco_cfg, deco_scan):
    return lineshape_scan(deco_cfg, readout_scan=deco_scan)


# ----- threshold ---------------------------------------------------------

def test_01_ideal_threshold_location_and_runtime(ideal_scan):
    scan, elapsed = ideal_scan
    s2 = scan.threshold.sin2
    ok = abs(s2 - 0.50) <= 0.02 and elapsed < 300.0
    _check("01 ideal threshold",
           ok, f"sin^2 = {s2:.4f} (want 0.50 +/- 0.02), "
               f"scan took {elapsed:.1f} s (budget 300 s)")


def test_02_decohered_threshold_location(deco_scan):
    area = deco_scan.threshold.pulse_area_over_pi
    ok = abs(area - 0.57) <= 0.03
    _check("02 decohered threshold",
           ok, f"pump area = {area:.4f} pi (want 0.57 +/- 0.03 pi), "
               f"sin^2 = {deco_scan.threshold.sin2:.4f}")


def test_03_peak_scales_linearly_with_excitation(deco_cfg, deco_scan):
    rabi = deco_cfg.params.rabi
    pairs = [(s, m.peak_rate) for t_p, s, m in
             zip(deco_scan.pulse_lengths, deco_scan.sin2_proxy, deco_scan.metrics)
             if rabi * t_p <= math.pi * (1.0 + 1e-12) and 0.62 <= s <= 0.90]
    x = np.array([s for s, _ in pairs])
    y = np.array([p for _, p in pairs])
    _, _, r2 = linear_fit(x, y)
    ok = r2 >= 0.98 and x.size >= 6
    _check("03 linear peak scaling",
           ok, f"R^2 = {r2:.4f} over sin^2 in [0.62, 0.90] "
               f"({x.size} points, want >= 0.98)")


def test_04_emission_revival_after_pi_pulse(pi_trace):
    traj, _ = pi_trace
    rate = np.real(traj.channels["photon_rate"])
    t = traj.times
    i0 = int(np.argmax(rate))
    found = None
    for i in range(i0 + 1, rate.size - 1):
        if found is None and rate[i] < rate[i - 1] and rate[i] <= rate[i + 1]:
            found = ("min", i)
        elif (found is not None and found[0] == "min"
              and rate[i] > rate[i - 1] and rate[i] >= rate[i + 1]):
            found = ("max", found[1], i)
            break
    ok = found is not None and found[0] == "max"
    if ok:
        _, imin, imax = found
        detail = (f"dip at {t[imin] * 1e6:.2f} us, revival at "
                  f"{t[imax] * 1e6:.2f} us, relative height "
                  f"{(rate[imax] - rate[imin]) / rate[i0]:.3f}")
    else:
        detail = "no post-peak minimum/maximum pair in the photon rate"
    _check("04 oscillatory revival", ok, detail)


def test_05_fringe_spacing_envelope_and_dark_zones(deco_lineshape):
    fr = deco_lineshape.fringe
    sp_ok = abs(fr.fringe_spacing - 200e3) <= 5e3
    env_ok = abs(fr.envelope_width - 1e6 / 0.3) <= 0.1 * 1e6 / 0.3
    dark_ok = fr.zero_zone_fraction > 0.0
    _check("05 fringe geometry",
           sp_ok and env_ok and dark_ok,
           f"spacing = {fr.fringe_spacing / 1e3:.1f} kHz (want 200 +/- 5), "
           f"envelope = {fr.envelope_width / 1e6:.3f} MHz (want 3.33 +/- 10%), "
           f"dark fraction = {fr.zero_zone_fraction:.3f} (want > 0)")


def test_06_half_pulse_stays_subradiant(deco_cfg, deco_scan):
    cfg = dataclasses.replace(deco_cfg, pulse_area_over_pi=0.5, readout=5e-6)
    _, m = run_trace(cfg)
    ratio = m.peak_rate / deco_scan.pi_peak
    ok = ratio < 1e-2
    _check("06 subradiant protection",
           ok, f"max rate over 5 us after a pi/2 pulse = {ratio:.2e} of the "
               f"pi-pulse peak (want < 1e-2)")


def test_07_burst_returns_the_untipped_population():
    p0 = standard_params()
    p = standard_params(gamma=p0.gamma / 10.0,
                        doppler_sigma=p0.doppler_sigma / 10.0)
    finals, devs = [], []
    for s0 in (0.7, 0.85, 1.0):
        theta = 2.0 * math.asin(math.sqrt(s0))
        cfg = ExperimentConfig(params=p, n_phase=2, n_doppler=6, readout=10e-6,
                               pulse_area_over_pi=theta / math.pi,
                               loss=LossModel(survival=1.0))
        traj, _ = run_trace(cfg)
        final = float(traj.channels["mean_inversion"].real[-1])
        finals.append(final)
        devs.append(abs(final - (1.0 - s0)))
    ok = max(devs) <= 0.1
    _check("07 post-burst population",
           ok, "final excited fraction = "
               + "/".join(f"{v:.3f}" for v in finals)
               + " for s0 = 0.7/0.85/1.0 (want 1 - s0 +/- 0.1, worst "
               f"deviation {max(devs):.3f})")


def test_08_delay_shrinks_with_inversion(deco_cfg, deco_scan):
    rabi = deco_cfg.params.rabi
    by_area = {round(rabi * t_p / math.pi, 4): m
               for t_p, m in zip(deco_scan.pulse_lengths, deco_scan.metrics)}
    d_pi, d_07 = by_area[1.0].delay, by_area[0.7].delay
    delays = [m.delay for t_p, m in zip(deco_scan.pulse_lengths, deco_scan.metrics)
              if m.burst and rabi * t_p <= math.pi * (1.0 + 1e-12)]
    worst = float(np.max(np.diff(delays))) if len(delays) > 1 else -math.inf
    ok = d_pi < d_07 and worst <= 1e-9
    _check("08 delay monotonicity",
           ok, f"delay(pi) = {d_pi * 1e6:.3f} us < delay(0.7 pi) = "
               f"{d_07 * 1e6:.3f} us; largest increase along the "
               f"above-threshold branch = {worst * 1e9:.2f} ns (allow 1 ns)")


# ----- exact-model cross-checks ------------------------------------------

def test_09a_single_atom_matches_damped_vacuum_rabi():
    kappa = TWO_PI * 780e3
    g = 1.25 * kappa
    gamma = 1.0 / 22e-6
    params = PhysicalParams(kappa=kappa, gamma=gamma, g_max=g, n_atoms=1.0,
                            rabi=TWO_PI * 833.333e3)
    seq = PulseSequence((Segment(duration=3e-6),), sample_dt=5e-9)
    times = np.arange(0.0, seq.total_duration + 2.5e-9, 5e-9)
    system = OracleSystem(params, n_atoms=1, fock_cutoff=6, seq=seq)
    exact = evolve_density(system, product_density(system, theta=math.pi),
                           sample_times=times)
    # one excitation shared by |e,0> and |g,1>: amplitudes obey a 2x2 linear
    # system with the half-rates on the diagonal
    a = np.array([[-0.5 * gamma, -1j * g], [-1j * g, -0.5 * kappa]])
    c = np.array([expm(a * t) @ np.array([1.0, 0.0]) for t in times])
    pop_ref = np.abs(c[:, 0]) ** 2
    nph_ref = np.abs(c[:, 1]) ** 2
    pop = np.array([o.mean_inversion for _, o in exact])
    nph = np.array([o.intracavity_photons for _, o in exact])
    err = max(float(np.max(np.abs(pop - pop_ref))),
              float(np.max(np.abs(nph - nph_ref))))
    ok = err < 1e-6
    _check("09a damped vacuum Rabi",
           ok, f"worst population deviation from the two-level amplitude "
               f"model = {err:.2e} (want < 1e-6)")


def test_09b_four_atoms_cumulant_vs_exact():
    kappa = TWO_PI * 780e3
    n = 4
    g = 2.5 * kappa / (2.0 * math.sqrt(n))
    params = PhysicalParams(kappa=kappa, gamma=1.0 / 22e-6, g_max=g,
                            n_atoms=float(n), rabi=TWO_PI * 833.333e3)
    theta = 0.75 * math.pi
    seq = PulseSequence((Segment(duration=3e-6),), sample_dt=5e-9)
    times = np.arange(0.0, seq.total_duration + 2.5e-9, 5e-9)

    grid = ClusterGrid(g=np.full(n, g), doppler=np.zeros(n),
                       multiplicity=np.ones(n))
    model = CumulantModel(params, grid)
    traj = integrate(model.rhs, model.initial_state(theta=theta), seq,
                     IntegratorConfig(), observer=model.observer())
    system = OracleSystem(params, n_atoms=n, fock_cutoff=24, seq=seq)
    exact = evolve_density(system, product_density(system, theta=theta),
                           sample_times=times)

    rate_c = traj.channels["photon_rate"].real
    t_x = np.array([t for t, _ in exact])
    rate_x = np.array([o.photon_rate for _, o in exact])
    ic, ix = int(np.argmax(rate_c)), int(np.argmax(rate_x))
    d_peak = abs(rate_c[ic] - rate_x[ix]) / rate_x[ix]
    d_time = abs(traj.times[ic] - t_x[ix]) / t_x[ix]
    ok = d_peak <= 0.15 and d_time <= 0.15
    _check("09b cumulant vs exact, N = 4",
           ok, f"peak rate differs by {d_peak * 100:.1f} %, peak time by "
               f"{d_time * 100:.1f} % (want <= 15 %)")


def test_09c_lossless_excitation_conservation():
    p = standard_params()
    grid = build_cluster_grid(p, n_phase=8, n_doppler=1)
    model = CumulantModel(p, grid, kappa=0.0, gamma=0.0)
    seq = PulseSequence((Segment(duration=2e-6),), sample_dt=2e-8)
    traj = integrate(model.rhs, model.initial_state(theta=0.75 * math.pi), seq,
                     IntegratorConfig(), observer=model.observer())
    tot = traj.channels["total_excitation"].real
    drift = float(np.max(np.abs(tot - tot[0])) / tot[0])
    ok = drift < 1e-8 and np.max(traj.channels["intracavity_photons"].real) > 1.0
    _check("09c lossless conservation",
           ok, f"relative drift of the total excitation = {drift:.2e} "
               f"(want < 1e-8) while photons cycle through the cavity")


# ----- frequency readout and servo ---------------------------------------

def test_10_error_signal_and_closed_loop(deco_cfg, deco_lineshape):
    frr = 1.0 / deco_cfg.ramsey_time
    cal = fl_calibration(deco_lineshape.table(), 0.1 * frr,
                         deco_cfg.ramsey_time, rabi=deco_cfg.params.rabi,
                         tau_pulse=deco_cfg.tau_pulse)
    at_zero = float(cal.fl[np.argmin(np.abs(cal.centers))])
    sel = np.abs(cal.centers) <= 0.3 * frr * (1.0 + 1e-12)
    asym = float(np.max(np.abs(cal.fl[sel] + cal.fl[sel][::-1])))
    s_coll = cal.slope_at_origin()
    s_ref = cal.slope_at_origin(reference=True)

    rec = lock_loop(dataclasses.replace(deco_cfg, initial_offset_hz=20e3),
                    lineshape=deco_lineshape)
    centers = np.abs(rec.center_hz)
    below = np.flatnonzero(centers < 1e3)
    n_iter = int(below[0]) + 1 if below.size else 10 ** 9
    settled = below.size > 0 and bool(np.all(centers[below[0]:] < 1e3))

    ok = (abs(at_zero) <= 1e-3 and asym <= 2e-3
          and abs(s_coll) > abs(s_ref)
          and n_iter <= 50 and settled)
    _check("10 frequency locator",
           ok, f"FL(0) = {at_zero:.1e} (want |.| <= 1e-3), antisymmetry over "
               f"+/- 0.3 FRR = {asym:.1e} (want <= 2e-3), slope "
               f"{abs(s_coll):.2e} vs reference {abs(s_ref):.2e} 1/Hz, "
               f"20 kHz offset pulled below 1 kHz after {n_iter} pairs "
               f"(want <= 50) and held")


def test_11_recycling_time_constants():
    taus = {}
    for mode, want in (("pulsed-ramsey", 0.313), ("no-pulses", 0.431),
                       ("mot-continuous", 0.409)):
        cfg = ExperimentConfig(params=standard_params(gamma=0.0,
                                                      doppler_sigma=0.0),
                               n_phase=2, n_doppler=1, readout=6e-6,
                               loss=LossModel(mode=mode))
        run = recycle_run(cfg, 25)
        slope, _, _ = linear_fit(run.times, np.log(run.atom_numbers))
        taus[mode] = (-1.0 / slope, want)
    ok = all(abs(tau - want) <= 0.02 * want for tau, want in taus.values())
    _check("11 recycling constants",
           ok, ", ".join(f"{mode}: {tau * 1e3:.1f} ms (want {want * 1e3:.0f})"
                         for mode, (tau, want) in taus.items())
               + " — all within 2%")


def test_12_determinism_and_tolerance_convergence(deco_cfg, pi_trace):
    traj1, m1 = pi_trace
    traj2, _ = run_trace(deco_cfg)
    identical = (traj1.times.tobytes() == traj2.times.tobytes()
                 and all(traj1.channels[k].tobytes() == traj2.channels[k].tobytes()
                         for k in traj1.channels))

    half = dataclasses.replace(
        deco_cfg, integrator=IntegratorConfig(rel_tol=5e-9, abs_tol=5e-11))
    _, m2 = run_trace(half)
    rel = {
        "peak_rate": abs(m2.peak_rate - m1.peak_rate) / m1.peak_rate,
        "peak_time": abs(m2.peak_time - m1.peak_time) / m1.peak_time,
        "delay": abs(m2.delay - m1.delay) / m1.delay,
        "area": abs(m2.area - m1.area) / m1.area,
    }
    worst = max(rel, key=rel.get)
    ok = identical and all(v < 5e-3 for v in rel.values())
    _check("12 determinism",
           ok, f"rerun byte-identical: {identical}; halving the integrator "
               f"tolerance moves burst metrics by at most {rel[worst]:.2e} "
               f"({worst}, want < 5e-3)")
