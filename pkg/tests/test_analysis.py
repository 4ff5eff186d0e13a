"""Metric extractors checked against synthetic data with known answers."""

import math

import numpy as np
import pytest
from scipy.linalg import expm

from cavityramsey.analysis import (
    AnalysisError,
    PulseMetrics,
    _invert_readout,
    _parabolic_refine,
    detect_threshold,
    fl_calibration,
    frequency_locator,
    fringe_metrics,
    linear_fit,
    pulse_envelope,
    pulse_metrics,
    two_pulse_population,
)
from cavityramsey.integrator import IntegrationStats, Trajectory

RABI = 2 * math.pi * 833.333e3


def _trace(t, rate):
    t = np.asarray(t, dtype=float)
    return Trajectory(
        times=t,
        channels={"photon_rate": np.asarray(rate, dtype=float)},
        segment_edges=np.array([0.0, t[-1]]),
        edge_states=[np.zeros(1, dtype=complex)],
        stats=IntegrationStats(),
    )


def _row(peak, burst=True):
    return PulseMetrics(peak_rate=peak, peak_time=0.0, delay=0.0,
                        area=0.0, burst=burst)


# ----- pulse_metrics -----------------------------------------------------

def test_pulse_metrics_gaussian_burst():
    t = np.linspace(0.0, 10e-6, 2001)   # 5 ns sampling, peak on-grid
    sigma = 0.5e-6
    rate = 1e12 * np.exp(-0.5 * ((t - 5e-6) / sigma) ** 2)
    m = pulse_metrics(_trace(t, rate), pump_end=2e-6, floor=1e10)
    assert m.peak_rate == pytest.approx(1e12, rel=1e-12)
    assert m.peak_time == pytest.approx(5e-6, abs=1e-15)
    assert m.delay == pytest.approx(3e-6, abs=1e-15)
    # window [2, 10] us holds essentially the whole Gaussian area
    assert m.area == pytest.approx(1e12 * sigma * math.sqrt(2 * math.pi), rel=1e-4)
    assert m.burst


def test_pulse_metrics_floor_flag():
    t = np.linspace(0.0, 4e-6, 401)
    rate = np.full_like(t, 3e3)
    m = pulse_metrics(_trace(t, rate), pump_end=1e-6, floor=1e6)
    assert not m.burst
    assert m.delay == 0.0          # argmax of a constant window is its start
    m2 = pulse_metrics(_trace(t, rate), pump_end=1e-6, floor=1e3)
    assert m2.burst


def test_pulse_metrics_empty_window():
    t = np.linspace(0.0, 1e-6, 64)
    with pytest.raises(AnalysisError, match="readout window"):
        pulse_metrics(_trace(t, np.ones_like(t)), pump_end=2e-6)


def test_pulse_metrics_as_row_is_flat():
    t = np.linspace(0.0, 1e-6, 64)
    m = pulse_metrics(_trace(t, np.ones_like(t)), pump_end=0.0)
    row = m.as_row()
    assert len(row) == 5 and row[4] == 1


# ----- detect_threshold --------------------------------------------------

def _cliff_scan(x, peaks, floor):
    return [(float(s), _row(float(p), p >= floor)) for s, p in zip(x, peaks)]


def test_threshold_midpoint_of_steepest_interval():
    # dark floor below the cliff at ~0.64, burst branch above; the ignition
    # interval is [0.625, 0.650] so the estimate is its midpoint
    x = np.round(np.arange(0.40, 0.9001, 0.025), 6)
    peaks = np.where(x < 0.64, 1e4 * (1.0 + x), 1e13 * x)
    fit = detect_threshold(_cliff_scan(x, peaks, floor=1e9))
    assert fit.sin2 == pytest.approx(0.6375, abs=1e-12)
    expected_area = 2.0 * math.asin(math.sqrt(0.6375)) / math.pi
    assert fit.pulse_area_over_pi == pytest.approx(expected_area, rel=1e-12)
    assert fit.jump_decades > 8.0
    assert fit.n_dark == int(np.sum(x < 0.64))
    assert fit.n_burst == int(np.sum(x >= 0.64))


def test_threshold_insensitive_to_burst_branch_slope():
    x = np.round(np.arange(0.30, 0.9001, 0.02), 6)
    for growth in (lambda s: s, lambda s: s**3, lambda s: np.exp(2 * s)):
        peaks = np.where(x < 0.55, 2e3, 5e12 * growth(x))
        fit = detect_threshold(_cliff_scan(x, peaks, floor=1e9))
        assert fit.sin2 == pytest.approx(0.55, abs=0.011)


def test_threshold_guards():
    x = np.linspace(0.3, 0.9, 12)
    with pytest.raises(AnalysisError, match=">= 8 points"):
        detect_threshold(_cliff_scan(x[:5], np.ones(5), 0.0))
    bad = list(x)
    bad[4] = bad[3]
    with pytest.raises(AnalysisError, match="strictly increasing"):
        detect_threshold(_cliff_scan(bad, np.ones(12), 0.0))
    with pytest.raises(AnalysisError, match="no sub-threshold"):
        detect_threshold(_cliff_scan(x, np.full(12, 1e12), floor=1.0))
    with pytest.raises(AnalysisError, match="no super-threshold"):
        detect_threshold(_cliff_scan(x, np.full(12, 1e2), floor=1e9))
    # mixed flags but monotonically falling peaks: no rising step to locate
    falling = 1e12 * np.exp(-10 * x)
    scan = [(float(s), _row(float(p), i < 6)) for i, (s, p) in enumerate(zip(x, falling))]
    with pytest.raises(AnalysisError, match="no rising step"):
        detect_threshold(scan)


# ----- linear_fit --------------------------------------------------------

def test_linear_fit_exact_line():
    x = np.linspace(0.0, 2.0, 17)
    slope, intercept, r2 = linear_fit(x, 3.5 * x - 1.25)
    assert slope == pytest.approx(3.5, rel=1e-12)
    assert intercept == pytest.approx(-1.25, rel=1e-12)
    assert r2 == pytest.approx(1.0, abs=1e-12)


def test_linear_fit_r2_drops_with_curvature():
    x = np.linspace(0.0, 1.0, 33)
    _, _, r2 = linear_fit(x, x**4)
    assert 0.5 < r2 < 0.98


def test_linear_fit_needs_three_points():
    with pytest.raises(AnalysisError):
        linear_fit(np.array([0.0, 1.0]), np.array([0.0, 1.0]))


# ----- two-pulse closed form --------------------------------------------

@pytest.mark.parametrize("delta,tau,gap", [
    (0.0, 300e-9, 4.7e-6),
    (2 * math.pi * 150e3, 300e-9, 4.7e-6),
    (-2 * math.pi * 420e3, 180e-9, 2.0e-6),
    (2 * math.pi * 1.1e6, 90e-9, 8.0e-6),
])
def test_two_pulse_population_matches_unitary(delta, tau, gap):
    sz = np.diag([1.0, -1.0])
    sx = np.array([[0.0, 1.0], [1.0, 0.0]])
    u_pulse = expm(-0.5j * (delta * sz + RABI * sx) * tau)
    u_gap = expm(-0.5j * delta * sz * gap)
    psi = (u_pulse @ u_gap @ u_pulse) @ np.array([0.0, 1.0])
    expected = abs(psi[0]) ** 2
    assert two_pulse_population(delta, RABI, tau, gap) == pytest.approx(
        expected, abs=1e-12)


def test_two_pulse_population_even_in_detuning():
    for d in (2 * math.pi * 130e3, 2 * math.pi * 870e3):
        assert two_pulse_population(d, RABI, 300e-9, 5e-6) == pytest.approx(
            two_pulse_population(-d, RABI, 300e-9, 5e-6), rel=1e-12)


# ----- pulse envelope ----------------------------------------------------

def test_pulse_envelope_on_resonance():
    tau = 300e-9
    env = pulse_envelope(np.array([0.0]), RABI, tau)
    assert env[0] == pytest.approx(math.sin(RABI * tau) ** 2, rel=1e-12)


def test_pulse_envelope_bounds_phase_maximum():
    # the envelope is the two-pulse excitation maximized over the free phase,
    # so it must upper-bound the sequence at every gap and touch it somewhere
    tau = 300e-9
    deltas = 2 * math.pi * np.linspace(-3e6, 3e6, 41)
    env = pulse_envelope(deltas, RABI, tau)
    assert np.all(env <= 1.0 + 1e-12)
    gaps = np.linspace(0.0, 20e-6, 4001)
    for d, e in zip(deltas[::5], env[::5]):
        pops = np.array([two_pulse_population(d, RABI, tau, g) for g in gaps])
        assert pops.max() <= e + 1e-12
        assert pops.max() == pytest.approx(e, abs=2e-4)


def test_pulse_envelope_validation():
    with pytest.raises(AnalysisError):
        pulse_envelope(np.array([0.0]), 0.0, 1e-7)
    with pytest.raises(AnalysisError):
        pulse_envelope(np.array([0.0]), RABI, -1e-7)


# ----- fringe_metrics ----------------------------------------------------

def _synthetic_lineshape(tau_true, period=5e-6, span=6e6, step=10e3,
                         amp=1e13, burst_floor_frac=0.01):
    d = np.arange(-span, span + 0.5 * step, step)
    env = pulse_envelope(2 * math.pi * d, RABI, tau_true)
    peaks = amp * env * np.cos(math.pi * d * period) ** 2
    floor = burst_floor_frac * peaks.max()
    rows = [(float(x), _row(float(p), p >= floor)) for x, p in zip(d, peaks)]
    return rows, peaks, floor


def test_fringe_spacing_and_envelope_recovery():
    tau = 300e-9
    rows, peaks, floor = _synthetic_lineshape(tau)
    fm = fringe_metrics(rows, ramsey_time=5e-6, tau_pulse=tau, rabi=RABI)
    assert fm.fringe_spacing == pytest.approx(200e3, rel=5e-3)
    assert fm.envelope_width == pytest.approx(1.0 / tau, rel=0.01)
    assert fm.zero_zone_fraction == pytest.approx(
        np.mean(peaks < 0.01 * peaks.max()))
    assert fm.kink_positions.size > 0
    assert np.all(np.diff(fm.kink_positions) > 0)


def test_fringe_envelope_follows_data_not_bracket():
    # data generated with a 30% longer pulse; the fit is seeded with the
    # nominal tau but must report the width of what was measured
    tau_nominal = 300e-9
    rows, _, _ = _synthetic_lineshape(1.3 * tau_nominal)
    fm = fringe_metrics(rows, ramsey_time=5e-6, tau_pulse=tau_nominal, rabi=RABI)
    assert fm.envelope_width == pytest.approx(1.0 / (1.3 * tau_nominal), rel=0.02)


def _quadratic_readout(exc, gain=1e14, knee=0.5):
    # a thresholded, strongly convex excitation-to-peak map
    e = np.maximum(np.asarray(exc) - knee, 0.0)
    return gain * e**2


def test_fringe_envelope_readout_linearization():
    # the nonlinear collective readout distorts the rate-space envelope;
    # inverting through the measured response must recover the true width
    tau, period, contrast = 300e-9, 5e-6, 0.9
    d = np.arange(-6e6, 6e6 + 5e3, 10e3)
    exc = contrast * pulse_envelope(2 * math.pi * d, RABI, tau) * np.cos(
        math.pi * d * period) ** 2
    peaks = _quadratic_readout(exc)
    floor = 0.01 * peaks.max()
    rows = [(float(x), _row(float(p), p >= floor)) for x, p in zip(d, peaks)]
    s_grid = np.linspace(0.0, 1.0, 201)
    table = list(zip(s_grid, _quadratic_readout(s_grid)))
    fm = fringe_metrics(rows, period, tau, RABI, readout=table)
    assert fm.envelope_width == pytest.approx(1.0 / tau, rel=0.01)
    biased = fringe_metrics(rows, period, tau, RABI)
    assert abs(biased.envelope_width - 1.0 / tau) > 3.0 * abs(
        fm.envelope_width - 1.0 / tau)


def test_fringe_envelope_readout_needs_enough_branch_coverage():
    tau = 300e-9
    rows, _, _ = _synthetic_lineshape(tau)
    # a readout branch covering only the top of the envelope leaves too few
    # invertible maxima
    s_grid = np.linspace(0.999, 1.0, 24)
    table = list(zip(s_grid, 1e13 * s_grid))
    with pytest.raises(AnalysisError, match="invertible branch"):
        fringe_metrics(rows, 5e-6, tau, RABI, readout=table)


def test_invert_readout_linear_map():
    s = np.linspace(0.2, 1.0, 33)
    table = list(zip(s, 5e12 * s))
    inside, exc = _invert_readout(table, np.array([1e12, 2.5e12, 9e12]))
    np.testing.assert_array_equal(inside, [True, True, False])
    np.testing.assert_allclose(exc, [0.2, 0.5], rtol=1e-9)


def test_invert_readout_uses_monotone_suffix():
    # sub-threshold plateau then a rising burst branch: only the branch inverts
    s = np.linspace(0.0, 1.0, 21)
    p = np.where(s < 0.5, 7e9, 1e13 * (s - 0.45))
    inside, exc = _invert_readout(list(zip(s, p)), np.array([3e12, 5e9]))
    assert inside.tolist() == [True, False]
    assert exc[0] == pytest.approx(0.75, abs=1e-6)


def test_invert_readout_validation():
    with pytest.raises(AnalysisError, match=">= 4"):
        _invert_readout([(0.1, 1.0), (0.2, 2.0)], np.array([1.5]))
    falling = [(x, 10.0 - x) for x in np.linspace(0, 1, 12)]
    with pytest.raises(AnalysisError, match="monotone burst branch"):
        _invert_readout(falling, np.array([5.0]))


def test_fringe_metrics_validation():
    tau = 300e-9
    rows, peaks, _ = _synthetic_lineshape(tau)
    with pytest.raises(AnalysisError, match="grid too small"):
        fringe_metrics(rows[:10], 5e-6, tau, RABI)
    shuffled = rows[:32] + [rows[20]]
    with pytest.raises(AnalysisError, match="strictly increasing"):
        fringe_metrics(shuffled, 5e-6, tau, RABI)
    with pytest.raises(AnalysisError, match="central maxima"):
        fringe_metrics(rows, 5e-6, tau, RABI, central_window=1e3)
    # floor between the 1st and 2nd side fringes leaves only three maxima:
    # enough for a spacing but not for the envelope fit
    h1 = 1e13 * pulse_envelope(np.array([2 * math.pi * 200e3]), RABI, tau)[0]
    h2 = 1e13 * pulse_envelope(np.array([2 * math.pi * 400e3]), RABI, tau)[0]
    with pytest.raises(AnalysisError, match="at least 5"):
        fringe_metrics(rows, 5e-6, tau, RABI, floor=0.5 * (h1 + h2))


# ----- frequency locator -------------------------------------------------

def test_frequency_locator_pair_mean():
    res = frequency_locator([1.0, 3.0, 2.0, 2.0, 5.0, 1.0])
    assert res.value == pytest.approx((0.5 + 0.0 - 4.0 / 6.0) / 3.0, rel=1e-12)
    assert res.n_pairs == 3
    assert res.n_excluded == 0


def test_frequency_locator_floor_exclusion():
    res = frequency_locator([1.0, 3.0, 0.01, 0.02, 2.0, 2.0], floor=0.5)
    assert res.n_pairs == 2
    assert res.n_excluded == 1
    assert res.value == pytest.approx(0.25, rel=1e-12)


def test_frequency_locator_scale_invariance():
    peaks = [2.2, 5.1, 3.3, 1.9, 4.4, 4.0]
    base = frequency_locator(peaks).value
    scaled = frequency_locator([7.3e5 * p for p in peaks]).value
    assert scaled == pytest.approx(base, rel=1e-12)


def test_frequency_locator_errors():
    with pytest.raises(AnalysisError, match="at least one pair"):
        frequency_locator([1.0])
    with pytest.raises(AnalysisError, match="odd count"):
        frequency_locator([1.0, 2.0, 3.0])
    with pytest.raises(AnalysisError, match="below the floor"):
        frequency_locator([0.1, 0.2, 0.3, 0.1], floor=1.0)


# ----- FL calibration ----------------------------------------------------

def _even_lineshape(period=5e-6, span=3e6, step=20e3, amp=1e13):
    d = np.arange(-span, span + 0.5 * step, step)
    peaks = amp * (1.0 + np.cos(2 * math.pi * d * period)) * np.exp(
        -0.5 * (d / 2e6) ** 2)
    return [(float(x), _row(float(p))) for x, p in zip(d, peaks)]


def test_fl_calibration_antisymmetric_about_resonance():
    cal = fl_calibration(_even_lineshape(), step=30e3, ramsey_time=5e-6)
    assert cal.frr == pytest.approx(200e3)
    i0 = int(np.argmin(np.abs(cal.centers)))
    assert cal.centers[i0] == 0.0
    assert abs(cal.fl[i0]) < 1e-12
    assert np.max(np.abs(cal.fl + cal.fl[::-1])) < 1e-10


def test_fl_calibration_inversion_round_trip():
    cal = fl_calibration(_even_lineshape(), step=30e3, ramsey_time=5e-6)
    lo, hi = cal.capture_range
    assert lo < 0.0 < hi
    for c in cal.centers[np.abs(cal.centers) < 0.75 * hi][::7]:
        fl_c = cal.fl[np.flatnonzero(cal.centers == c)[0]]
        assert cal.detuning_from_fl(float(fl_c)) == pytest.approx(
            float(c), abs=1.0)


def test_fl_calibration_clips_saturated_values():
    cal = fl_calibration(_even_lineshape(), step=30e3, ramsey_time=5e-6)
    lo, hi = cal.capture_range
    d_hi = cal.detuning_from_fl(-2.0)   # FL decreases with detuning
    d_lo = cal.detuning_from_fl(+2.0)
    assert d_hi == pytest.approx(hi, abs=1.0)
    assert d_lo == pytest.approx(lo, abs=1.0)


def test_fl_calibration_slope_sign_and_reference():
    cal = fl_calibration(_even_lineshape(), step=30e3, ramsey_time=5e-6,
                         rabi=RABI, tau_pulse=300e-9)
    assert cal.slope_at_origin() < 0.0
    assert cal.fl_reference is not None
    assert math.isfinite(cal.slope_at_origin(reference=True))
    bare = fl_calibration(_even_lineshape(), step=30e3, ramsey_time=5e-6)
    with pytest.raises(AnalysisError, match="no reference curve"):
        bare.slope_at_origin(reference=True)


def test_fl_calibration_support_and_flat_guards():
    with pytest.raises(AnalysisError, match="support"):
        fl_calibration(_even_lineshape(span=60e3), step=30e3, ramsey_time=5e-6)
    d = np.arange(-3e6, 3e6 + 1e4, 2e4)
    flat = [(float(x), _row(1e12)) for x in d]
    cal = fl_calibration(flat, step=30e3, ramsey_time=5e-6)
    with pytest.raises(AnalysisError, match="flat at the origin"):
        _ = cal.capture_range


# ----- parabolic refinement ----------------------------------------------

def test_parabolic_refine_exact_on_uneven_grid():
    x = np.array([0.0, 1.0, 1.8, 3.1, 4.0])
    xv_true, yv_true = 2.05, 7.0
    y = yv_true - 0.6 * (x - xv_true) ** 2
    xv, yv = _parabolic_refine(x, y, 2)
    assert xv == pytest.approx(xv_true, abs=1e-12)
    assert yv == pytest.approx(yv_true, abs=1e-12)


def test_parabolic_refine_fallbacks():
    x = np.arange(5.0)
    flat = np.ones(5)
    assert _parabolic_refine(x, flat, 2) == (2.0, 1.0)
    convex = (x - 2.0) ** 2
    assert _parabolic_refine(x, convex, 2) == (2.0, 0.0)
    y = np.array([0.0, 1.0, 0.5, 0.2, 0.1])
    assert _parabolic_refine(x, y, 0) == (0.0, 0.0)
    assert _parabolic_refine(x, y, 4) == (4.0, 0.1)
