"""Scalar metrics extracted from simulated traces and scans.

Covers burst metrics of a single trace (peak, delay, emitted area),
threshold location of an excitation scan, fringe geometry of a detuning
scan, and the frequency-locator error signal with its detuning calibration.

Peak extraction from time traces uses the raw maximum on the dense sample
grid.  Fringe maxima in the detuning domain are refined with a local
parabola through the three points around each grid maximum, since the
fringe-spacing tolerance is much tighter than a practical detuning grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence as TypingSequence

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import minimize_scalar

from .integrator import Trajectory


class AnalysisError(ValueError):
    pass


# ----- single-trace burst metrics ---------------------------------------

@dataclass(frozen=True)
class PulseMetrics:
    peak_rate: float   # 1/s
    peak_time: float   # s (absolute trace time)
    delay: float       # s, pump end -> peak
    area: float        # emitted photons over the readout window
    burst: bool        # False when peak_rate < the declared floor

    def as_row(self) -> tuple[float, float, float, float, int]:
        return (self.peak_rate, self.peak_time, self.delay, self.area, int(self.burst))


def pulse_metrics(traj: Trajectory, pump_end: float, floor: float = 0.0) -> PulseMetrics:
    """Burst metrics over the readout window t >= pump_end."""
    t = traj.times
    rate = np.real(traj.channels["photon_rate"])
    span_tol = 1e-12 * max(t[-1], 1.0)
    mask = t >= pump_end - span_tol
    if mask.sum() < 2:
        raise AnalysisError(
            f"readout window is empty: pump_end = {pump_end:.3e} s, "
            f"trace ends at {t[-1]:.3e} s"
        )
    tw = t[mask]
    rw = rate[mask]
    i = int(np.argmax(rw))
    peak = float(rw[i])
    peak_time = float(tw[i])
    area = float(np.trapezoid(rw, tw))
    return PulseMetrics(
        peak_rate=peak,
        peak_time=peak_time,
        delay=max(peak_time - pump_end, 0.0),
        area=max(area, 0.0),
        burst=bool(peak >= floor),
    )


# ----- threshold detection ----------------------------------------------

@dataclass(frozen=True)
class ThresholdFit:
    sin2: float              # threshold in the sin^2(Omega t_P / 2) coordinate
    pulse_area_over_pi: float  # the same threshold as Omega t_P / pi
    jump_decades: float      # height of the ignition step in log10(peak)
    n_dark: int
    n_burst: int


def detect_threshold(scan: TypingSequence[tuple[float, PulseMetrics]]
                     ) -> ThresholdFit:
    """Ignition point of collective emission vs excitation proxy.

    ``scan`` holds (sin^2 proxy, metrics) pairs, sorted in the proxy.  Below
    threshold the ensemble stays subradiant (peaks orders of magnitude under
    the burst branch); crossing it, the peak rate jumps by decades within a
    narrow proxy interval.  The threshold is the midpoint of the steepest
    interval of log10(peak) vs proxy, so its resolution is half the local
    grid spacing -- sample finely around the expected knee.

    Note the deliberately different convention from the per-point ``burst``
    flag: that flag compares against the no-burst floor (a fixed fraction of
    the pi-pulse peak), which sits partway up the ignition step and would
    bias a threshold read off it.
    """
    if len(scan) < 8:
        raise AnalysisError(f"threshold scan needs >= 8 points, got {len(scan)}")
    x = np.array([s for s, _ in scan])
    if np.any(np.diff(x) <= 0):
        raise AnalysisError("scan must be strictly increasing in the sin^2 proxy")
    peaks = np.array([m.peak_rate for _, m in scan])
    burst = np.array([m.burst for _, m in scan])
    n_dark = int(np.sum(~burst))
    n_burst = int(burst.sum())
    if n_dark == 0:
        raise AnalysisError("scan has no sub-threshold (no-burst) points")
    if n_burst == 0:
        raise AnalysisError("scan has no super-threshold (burst) points")

    floor = 1e-30 * peaks.max()
    logp = np.log10(np.maximum(peaks, floor))
    slopes = np.diff(logp) / np.diff(x)
    k = int(np.argmax(slopes))
    jump = float(logp[k + 1] - logp[k])
    if jump <= 0.0:
        raise AnalysisError("no rising step in the peak-vs-proxy scan")
    s_star = float(np.clip(0.5 * (x[k] + x[k + 1]), 0.0, 1.0))
    return ThresholdFit(
        sin2=s_star,
        pulse_area_over_pi=2.0 * math.asin(math.sqrt(s_star)) / math.pi,
        jump_decades=jump,
        n_dark=n_dark,
        n_burst=n_burst,
    )


def linear_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """(slope, intercept, R^2) of an ordinary least-squares line."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 3:
        raise AnalysisError("linear_fit needs >= 3 points")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


# ----- fringe geometry ---------------------------------------------------

@dataclass(frozen=True)
class FringeMetrics:
    fringe_spacing: float       # Hz
    envelope_width: float       # Hz, Fourier width 1/tau of the fitted envelope
    zero_zone_fraction: float   # fraction of scanned grid points with no burst
    kink_positions: np.ndarray  # Hz, floor-crossing detunings


def _parabolic_refine(x: np.ndarray, y: np.ndarray, i: int) -> tuple[float, float]:
    """Vertex of the parabola through points i-1, i, i+1 (falls back to the
    raw sample at the grid edges or for degenerate curvature)."""
    if i == 0 or i == x.size - 1:
        return float(x[i]), float(y[i])
    x0, x1, x2 = x[i - 1], x[i], x[i + 1]
    y0, y1, y2 = y[i - 1], y[i], y[i + 1]
    denom = (y0 - 2.0 * y1 + y2)
    if denom >= 0.0 or not np.isfinite(denom):
        return float(x1), float(y1)
    # uniform-spacing vertex formula is inadequate for two-tier grids
    a = ((y2 - y1) / (x2 - x1) - (y1 - y0) / (x1 - x0)) / (x2 - x0)
    b = (y2 - y1) / (x2 - x1) - a * (x2 + x1)
    if a >= 0.0:
        return float(x1), float(y1)
    xv = -b / (2.0 * a)
    if not x0 <= xv <= x2:
        return float(x1), float(y1)
    c = y1 - (a * x1 + b) * x1
    return float(xv), float((a * xv + b) * xv + c)


def _floor_crossing(x0, x1, y0, y1, floor) -> float:
    if y1 == y0:
        return float(x1)
    return float(x0 + (floor - y0) * (x1 - x0) / (y1 - y0))


def pulse_envelope(delta: np.ndarray, rabi: float, tau: float) -> np.ndarray:
    """Fringe-maxima envelope of a two-pulse sequence vs detuning (rad/s).

    For square pulses of length ``tau`` and Rabi rate ``rabi``, maximizing
    the two-pulse transition probability over the free-evolution phase
    leaves 4 (omega^2/W^2) sin^2(W tau / 2) [cos^2 + (delta/W)^2 sin^2]
    with W the off-resonance flopping rate; the central lobe has Fourier
    width ~ 1/tau.
    """
    if rabi <= 0.0 or tau <= 0.0:
        raise AnalysisError("pulse_envelope needs rabi > 0 and tau > 0")
    W = np.hypot(rabi, np.asarray(delta, dtype=float))
    s2 = np.sin(0.5 * W * tau) ** 2
    fr = (rabi / W) ** 2
    return 4.0 * fr * s2 * ((1.0 - s2) + (1.0 - fr) * s2)


def _min_over_tau(sse, tau_bracket: tuple[float, float]) -> float:
    """Global-ish minimizer over tau: the residual is multimodal (the
    envelope oscillates), so a coarse scan brackets the minimum before the
    bounded local refine."""
    taus = np.linspace(tau_bracket[0], tau_bracket[1], 241)
    costs = np.array([sse(t) for t in taus])
    k = int(np.argmin(costs))
    lo = taus[max(k - 1, 0)]
    hi = taus[min(k + 1, taus.size - 1)]
    res = minimize_scalar(sse, bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-6 * taus[k]})
    return float(res.x)


def _fit_envelope_tau(delta: np.ndarray, rates: np.ndarray, rabi: float,
                      tau_bracket: tuple[float, float]) -> float:
    """Pulse length whose envelope best matches the observed fringe maxima.

    Peak rate is modeled as affine in the excitation the sequence prepares:
    A * envelope(delta; tau) - C with A, C profiled out by linear least
    squares at each tau.
    """
    ones = np.ones_like(rates)

    def sse(tau: float) -> float:
        design = np.column_stack([pulse_envelope(delta, rabi, tau), -ones])
        coef, *_ = np.linalg.lstsq(design, rates, rcond=None)
        resid = design @ coef - rates
        return float(resid @ resid)

    return _min_over_tau(sse, tau_bracket)


def _fit_envelope_scale(delta: np.ndarray, excitation: np.ndarray, rabi: float,
                        tau_bracket: tuple[float, float]) -> float:
    """Pure-scale envelope fit kappa * envelope(delta; tau) in excitation
    space (kappa profiled analytically)."""

    def sse(tau: float) -> float:
        env = pulse_envelope(delta, rabi, tau)
        k = float(env @ excitation) / float(env @ env)
        resid = k * env - excitation
        return float(resid @ resid)

    return _min_over_tau(sse, tau_bracket)


def _invert_readout(readout, rates: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map peak rates back to prepared excitation through a measured
    single-pulse response.

    ``readout`` holds (excitation, peak_rate) rows of an excitation scan of
    the same ensemble.  Only the burst branch -- the maximal suffix (sorted
    in excitation) over which the peak rate strictly increases -- is
    invertible; rates falling outside it are flagged out.
    """
    tab = np.asarray(readout, dtype=float)
    if tab.ndim != 2 or tab.shape[1] != 2 or tab.shape[0] < 4:
        raise AnalysisError("readout table needs >= 4 (excitation, peak) rows")
    order = np.argsort(tab[:, 0])
    s, p = tab[order, 0], tab[order, 1]
    k = p.size - 1
    while k > 0 and p[k - 1] < p[k]:
        k -= 1
    s, p = s[k:], p[k:]
    if p.size < 4:
        raise AnalysisError("readout table has no monotone burst branch")
    inv = PchipInterpolator(p, s)
    inside = (rates >= p[0]) & (rates <= p[-1])
    return inside, np.asarray(inv(rates[inside]), dtype=float)


def fringe_metrics(
    lineshape: TypingSequence[tuple[float, PulseMetrics]],
    ramsey_time: float,
    tau_pulse: float,
    rabi: float,
    floor: float | None = None,
    central_window: float | None = None,
    readout: TypingSequence[tuple[float, float]] | None = None,
) -> FringeMetrics:
    """Geometry of a peak-emission lineshape over laser detuning (Hz).

    ``floor`` defaults to 1% of the lineshape maximum.  Fringe spacing is
    the mean spacing of parabola-refined local maxima within
    ``central_window`` of zero (default 2.6 / ramsey_time, i.e. the central
    five fringes).  The envelope width is the Fourier width 1/tau of the
    finite-pulse-length envelope fitted through all bursting fringe maxima
    (``tau_pulse`` only brackets that fit; the reported width comes from
    the curvature of the data).

    The collective readout is a nonlinear map from prepared excitation to
    peak rate, which biases an envelope fitted directly to rates.  Passing
    ``readout`` -- (excitation, peak_rate) rows of a single-pulse excitation
    scan at the same operating point -- inverts that map first, and the
    envelope is fitted as a pure scale in excitation space.  Without it the
    readout is approximated as affine (gain plus threshold offset) over the
    observed maxima.
    """
    delta = np.array([d for d, _ in lineshape])
    if delta.size < 16:
        raise AnalysisError("lineshape grid too small")
    if np.any(np.diff(delta) <= 0):
        raise AnalysisError("lineshape must be strictly increasing in detuning")
    peaks = np.array([m.peak_rate for _, m in lineshape])
    burst = np.array([m.burst for _, m in lineshape])
    if floor is None:
        floor = 0.01 * peaks.max()

    # refined local maxima above the floor
    interior = (peaks[1:-1] > peaks[:-2]) & (peaks[1:-1] >= peaks[2:])
    max_idx = np.flatnonzero(interior) + 1
    max_idx = max_idx[peaks[max_idx] >= floor]
    refined = [_parabolic_refine(delta, peaks, int(i)) for i in max_idx]

    # central-window maxima -> fringe spacing
    if central_window is None:
        central_window = 2.6 / ramsey_time
    centers = sorted(xv for xv, _ in refined if abs(xv) <= central_window)
    if len(centers) < 3:
        raise AnalysisError(
            f"only {len(centers)} central maxima found; grid resolution or "
            f"span is insufficient for a fringe-spacing estimate"
        )
    spacing = float(np.mean(np.diff(centers)))

    # envelope width from the maxima envelope
    if len(refined) < 5:
        raise AnalysisError(
            f"only {len(refined)} fringe maxima above the floor; the "
            f"envelope fit needs at least 5"
        )
    dm = 2.0 * math.pi * np.array([xv for xv, _ in refined])
    pm = np.array([pv for _, pv in refined])
    bracket = (0.25 * tau_pulse, 4.0 * tau_pulse)
    if readout is None:
        tau_fit = _fit_envelope_tau(dm, pm, rabi, bracket)
    else:
        inside, exc = _invert_readout(readout, pm)
        if int(inside.sum()) < 5:
            raise AnalysisError(
                f"only {int(inside.sum())} fringe maxima fall on the invertible "
                f"branch of the readout table; the envelope fit needs at least 5"
            )
        tau_fit = _fit_envelope_scale(dm[inside], exc, rabi, bracket)

    # kinks: every floor crossing of the peak curve
    kinks = []
    for j in range(delta.size - 1):
        a, b = peaks[j], peaks[j + 1]
        if (a < floor) != (b < floor):
            kinks.append(_floor_crossing(delta[j], delta[j + 1], a, b, floor))

    return FringeMetrics(
        fringe_spacing=spacing,
        envelope_width=1.0 / tau_fit,
        zero_zone_fraction=float(np.mean(~burst)),
        kink_positions=np.array(kinks),
    )


# ----- frequency locator -------------------------------------------------

@dataclass(frozen=True)
class FLResult:
    value: float
    n_pairs: int      # pairs entering the mean
    n_excluded: int   # pairs dropped because both peaks sat below the floor


def frequency_locator(peaks: TypingSequence[float], floor: float = 0.0) -> FLResult:
    """Mean of (P2 - P1)/(P2 + P1) over consecutive peak pairs.

    Normalization by the pair sum makes the value invariant under a common
    rescaling of all peaks (atom-number fluctuations cancel).  Pairs where
    both peaks are below ``floor`` are excluded from the mean but counted.
    """
    p = np.asarray(peaks, dtype=float)
    if p.size < 2:
        raise AnalysisError(f"need at least one pair of peaks, got {p.size}")
    if p.size % 2:
        raise AnalysisError(f"peaks must come in pairs, got odd count {p.size}")
    p1 = p[0::2]
    p2 = p[1::2]
    keep = (p1 >= floor) | (p2 >= floor)
    n_excluded = int(np.sum(~keep))
    if not np.any(keep):
        raise AnalysisError("every peak pair sits below the floor")
    fl = (p2[keep] - p1[keep]) / (p2[keep] + p1[keep])
    return FLResult(value=float(np.mean(fl)), n_pairs=int(keep.sum()),
                    n_excluded=n_excluded)


def two_pulse_population(delta: float, rabi: float, tau_pulse: float,
                         gap: float) -> float:
    """Excited-state population after [pulse, gap, pulse], no decay.

    Closed form of the 2x2 unitary sequence for a square pulse of length
    ``tau_pulse`` at detuning ``delta`` (rad/s), free gap ``gap``; the
    reference 'traditional Ramsey' lineshape of a population readout.
    """
    omega_r = math.hypot(rabi, delta)
    if omega_r == 0.0:
        return 0.0
    half = 0.5 * omega_r * tau_pulse
    s, c = math.sin(half), math.cos(half)
    phi = 0.5 * delta * gap
    amp = (math.cos(phi) * c - (delta / omega_r) * math.sin(phi) * s)
    return float(4.0 * (rabi / omega_r) ** 2 * s * s * amp * amp)


@dataclass(eq=False)
class FLCalibration:
    centers: np.ndarray       # Hz, commanded center detunings
    fl: np.ndarray            # collective-readout FL at each center
    fl_reference: np.ndarray | None  # traditional-Ramsey FL, same centers
    step: float               # Hz
    frr: float                # Hz, free Ramsey range 1/T

    def slope_at_origin(self, reference: bool = False) -> float:
        """Signed dFL/d(detuning) at zero in 1/Hz (central difference at
        +/- 0.02 FRR of the interpolated curve)."""
        y = self.fl_reference if reference else self.fl
        if y is None:
            raise AnalysisError("no reference curve in this calibration")
        interp = PchipInterpolator(self.centers, y)
        h = 0.02 * self.frr
        return float((interp(h) - interp(-h)) / (2.0 * h))

    def _monotone_core(self, saturation: float = 0.995) -> slice:
        """Largest index window around c = 0 with strictly monotone FL.

        The collective curve saturates at +/-1 once one interrogation of the
        pair falls in a dark zone; points at |FL| >= ``saturation`` carry no
        invertible information and end the window.
        """
        i0 = int(np.argmin(np.abs(self.centers)))
        d = np.diff(self.fl)
        if i0 < d.size and d[i0] != 0.0:
            sign = math.copysign(1.0, d[i0])
        elif i0 > 0 and d[i0 - 1] != 0.0:
            sign = math.copysign(1.0, d[i0 - 1])
        else:
            raise AnalysisError("calibration curve is flat at the origin")
        lo = i0
        while lo > 0 and d[lo - 1] * sign > 0.0 and abs(self.fl[lo - 1]) < saturation:
            lo -= 1
        hi = i0
        while hi < d.size and d[hi] * sign > 0.0 and abs(self.fl[hi + 1]) < saturation:
            hi += 1
        if hi - lo < 3:
            raise AnalysisError("monotone capture range is too narrow to invert")
        return slice(lo, hi + 1)

    @property
    def capture_range(self) -> tuple[float, float]:
        """Detuning window (Hz) over which the discriminator is invertible."""
        core = self._monotone_core()
        return float(self.centers[core][0]), float(self.centers[core][-1])

    def detuning_from_fl(self, fl_value: float) -> float:
        """Inverse of the calibration over its monotone capture range.

        Values beyond the range are clipped to its edge, so a servo fed with
        a saturated FL excursion steps back by the edge detuning instead of
        extrapolating.
        """
        core = self._monotone_core()
        x = self.centers[core]
        y = self.fl[core]
        if y[0] > y[-1]:
            x, y = x[::-1], y[::-1]
        clipped = min(max(fl_value, y[0]), y[-1])
        interp = PchipInterpolator(y, x)
        return float(interp(clipped))


def fl_calibration(
    lineshape: TypingSequence[tuple[float, PulseMetrics]],
    step: float,
    ramsey_time: float,
    span_fraction: float = 0.4,
    n_centers: int = 81,
    rabi: float | None = None,
    tau_pulse: float | None = None,
) -> FLCalibration:
    """FL-vs-detuning map for symmetric stepping of size ``step`` (Hz).

    For each commanded center c the two interrogations sit at c -/+ step/2;
    FL(c) is their pair asymmetry, read off a monotone-safe interpolation of
    the peak lineshape.  When ``rabi`` and ``tau_pulse`` are given, the
    analytic population lineshape of the same sequence provides the
    traditional-Ramsey reference column.
    """
    delta = np.array([d for d, _ in lineshape])
    peaks = np.array([m.peak_rate for _, m in lineshape])
    if np.any(np.diff(delta) <= 0):
        raise AnalysisError("lineshape must be strictly increasing in detuning")
    frr = 1.0 / ramsey_time
    centers = np.linspace(-span_fraction * frr, span_fraction * frr, n_centers)
    lo_needed = centers[0] - 0.5 * step
    hi_needed = centers[-1] + 0.5 * step
    if lo_needed < delta[0] or hi_needed > delta[-1]:
        raise AnalysisError(
            f"calibration needs lineshape support over [{lo_needed:.0f}, "
            f"{hi_needed:.0f}] Hz but the scan covers [{delta[0]:.0f}, {delta[-1]:.0f}]"
        )
    # pair convention: first interrogation at c - step/2, second at c + step/2;
    # FL = (P2 - P1)/(P2 + P1), so FL decreases through zero at resonance
    interp = PchipInterpolator(delta, peaks)
    p1 = interp(centers - 0.5 * step)
    p2 = interp(centers + 0.5 * step)
    fl = (p2 - p1) / (p2 + p1)

    fl_ref = None
    if rabi is not None and tau_pulse is not None:
        gap = ramsey_time - tau_pulse
        ref1 = np.array([two_pulse_population(2 * np.pi * (c - 0.5 * step), rabi,
                                              tau_pulse, gap) for c in centers])
        ref2 = np.array([two_pulse_population(2 * np.pi * (c + 0.5 * step), rabi,
                                              tau_pulse, gap) for c in centers])
        fl_ref = (ref2 - ref1) / (ref2 + ref1)
    return FLCalibration(centers=centers, fl=np.asarray(fl),
                         fl_reference=fl_ref, step=step, frr=frr)
