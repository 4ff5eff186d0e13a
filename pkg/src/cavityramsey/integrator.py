"""Segment-aware ODE integration.

Two methods are provided:

* ``dp54`` -- the adaptive embedded Dormand-Prince 5(4) pair with FSAL and
  the standard quartic continuous extension used for dense output,
* ``rk4``  -- classical fixed-step RK4 (mainly for convergence checks).

Integration proceeds segment by segment over a :class:`PulseSequence`; pulse
edges are hard boundaries at which the stepper restarts, so drive
discontinuities are never stepped across.  Observable channels are sampled
on a fixed grid (every ``sample_dt`` plus all segment edges) from the dense
interpolant of each accepted step, which keeps the sampling error at the
same order as the integration error.

Everything here is deterministic: same inputs give bit-identical outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence as TypingSequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from .pulses import PulseSequence, Segment


class NumericalError(RuntimeError):
    """The integration produced a non-finite state or could not proceed."""


class StepSizeUnderflow(NumericalError):
    pass


# Dormand-Prince 5(4) tableau.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# Difference between the 5th- and embedded 4th-order weights.
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])
# Quartic dense-output coefficients: w_s(theta) = sum_j P[s, j] theta^(j+1).
_P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 5.0


@dataclass(frozen=True)
class IntegratorConfig:
    rel_tol: float = 1e-8
    abs_tol: float = 1e-10
    max_step: float = math.inf      # s
    initial_step: float | None = None  # s; required for method="rk4"
    method: str = "dp54"

    def __post_init__(self) -> None:
        for name in ("rel_tol", "abs_tol"):
            value = getattr(self, name)
            if not 0.0 < value <= 1e-2:
                raise ValueError(f"{name} must lie in (0, 1e-2], got {value}")
        if not self.max_step > 0.0:
            raise ValueError(f"max_step must be positive, got {self.max_step}")
        if self.initial_step is not None and not self.initial_step > 0.0:
            raise ValueError(f"initial_step must be positive, got {self.initial_step}")
        if self.method not in ("dp54", "rk4"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.method == "rk4" and self.initial_step is None:
            raise ValueError("method 'rk4' needs an explicit initial_step")


@dataclass
class SegmentStats:
    steps: int = 0
    rejected: int = 0
    rhs_evals: int = 0


@dataclass
class IntegrationStats:
    per_segment: list[SegmentStats] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return sum(s.steps for s in self.per_segment)

    @property
    def rejected(self) -> int:
        return sum(s.rejected for s in self.per_segment)

    @property
    def rhs_evals(self) -> int:
        return sum(s.rhs_evals for s in self.per_segment)


@dataclass(frozen=True, eq=False)
class Observer:
    """Maps a (time, state-slice) pair to a row of named channel values.

    ``indices`` selects which state components the dense interpolant has to
    produce per sample; ``None`` means the full state.
    """
    channel_names: tuple[str, ...]
    fn: Callable[[float, np.ndarray], np.ndarray]
    indices: np.ndarray | None = None


@dataclass(eq=False)
class Trajectory:
    times: np.ndarray                      # (n_samples,)
    channels: dict[str, np.ndarray]        # each (n_samples,), observer dtype
    segment_edges: np.ndarray
    edge_states: list[np.ndarray]          # full state at t=0 and every edge
    stats: IntegrationStats
    states: np.ndarray | None = None       # (n_samples, n_vars), only without observer

    @property
    def final_state(self) -> np.ndarray:
        return self.edge_states[-1]


def _rms_norm(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.abs(x) ** 2)))


def _initial_step(rhs, t0, y0, f0, seg, span, cfg) -> float:
    """Deterministic starting step (same strategy as Hairer's DOPRI codes)."""
    upper = min(cfg.max_step, span)
    if cfg.initial_step is not None:
        return min(cfg.initial_step, upper)
    scale = cfg.abs_tol + cfg.rel_tol * np.abs(y0)
    d0 = _rms_norm(y0 / scale)
    d1 = _rms_norm(f0 / scale)
    if d0 < 1e-5 or d1 < 1e-5:
        h0 = 1e-6 * span
    else:
        h0 = 0.01 * d0 / d1
    h0 = min(h0, upper)
    y1 = y0 + h0 * f0
    f1 = rhs(t0 + h0, y1, seg)
    d2 = _rms_norm((f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6 * span, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, upper)


def _sample_grid(seq: PulseSequence, sample_times) -> np.ndarray:
    if sample_times is not None:
        ts = np.asarray(sample_times, dtype=float)
        if ts.ndim != 1 or ts.size == 0:
            raise ValueError("sample_times must be a non-empty 1-d array")
        if np.any(np.diff(ts) <= 0.0):
            raise ValueError("sample_times must be strictly increasing")
        total = seq.total_duration
        if ts[0] < 0.0 or ts[-1] > total * (1 + 1e-12):
            raise ValueError("sample_times outside the sequence span")
        return ts
    total = seq.total_duration
    grid = np.arange(0.0, total, seq.sample_dt)
    grid = np.union1d(grid, seq.edges)
    # collapse samples that only differ by rounding of the edge arithmetic
    keep = np.concatenate([[True], np.diff(grid) > 1e-12 * max(total, 1.0)])
    grid = grid[keep]
    if grid[-1] < total:
        grid = np.append(grid, total)
    else:
        grid[-1] = total
    return grid


def integrate(
    rhs: Callable[[float, np.ndarray, Segment], np.ndarray],
    y0: np.ndarray,
    seq: PulseSequence,
    cfg: IntegratorConfig,
    observer: Observer | None = None,
    sample_times: TypingSequence[float] | None = None,
) -> Trajectory:
    """Integrate ``dy/dt = rhs(t, y, segment)`` across all segments of ``seq``."""
    y = np.asarray(y0).astype(complex, copy=True)
    samples = _sample_grid(seq, sample_times)
    edges = seq.edges

    idx = observer.indices if observer is not None else None
    rows: list[np.ndarray] = []
    sample_ts: list[float] = []
    s_ptr = 0  # next sample to emit

    def emit_slice(t: float, y_sub: np.ndarray) -> None:
        if observer is None:
            rows.append(np.array(y_sub, copy=True))
        else:
            # keep the observer's dtype: coherence-like channels are complex
            rows.append(np.asarray(observer.fn(t, y_sub)))
        sample_ts.append(t)

    def emit(t: float, y_at: np.ndarray) -> None:
        emit_slice(t, y_at if idx is None else y_at[idx])

    stats = IntegrationStats()
    edge_states = [y.copy()]
    # sample at t=0 if requested
    while s_ptr < samples.size and samples[s_ptr] <= edges[0]:
        emit(float(samples[s_ptr]), y)
        s_ptr += 1

    for k, seg in enumerate(seq.segments):
        t0, t1 = float(edges[k]), float(edges[k + 1])
        sstat = SegmentStats()
        stats.per_segment.append(sstat)
        if cfg.method == "rk4":
            y, s_ptr = _run_rk4(rhs, y, t0, t1, seg, cfg, samples, s_ptr, emit, sstat)
        else:
            y, s_ptr = _run_dp54(rhs, y, t0, t1, seg, cfg, samples, s_ptr,
                                 emit_slice, sstat, idx)
        edge_states.append(y.copy())

    # trailing samples that coincide with the final time
    while s_ptr < samples.size:
        emit(float(samples[s_ptr]), y)
        s_ptr += 1

    times = np.asarray(sample_ts)
    if observer is None:
        return Trajectory(times, {}, edges, edge_states, stats,
                          states=np.asarray(rows))
    table = np.asarray(rows)
    channels = {name: table[:, j] for j, name in enumerate(observer.channel_names)}
    return Trajectory(times, channels, edges, edge_states, stats)


def _run_dp54(rhs, y, t0, t1, seg, cfg, samples, s_ptr, emit_slice, sstat, idx=None):
    span = t1 - t0
    t = t0
    f0 = rhs(t0, y, seg)
    sstat.rhs_evals += 1
    if not np.all(np.isfinite(np.abs(f0))):
        raise NumericalError(f"non-finite derivative at t = {t0:.6e} s")
    h = _initial_step(rhs, t0, y, f0, seg, span, cfg)
    sstat.rhs_evals += 1  # probe evaluation inside _initial_step
    if cfg.initial_step is not None:
        sstat.rhs_evals -= 1

    n = y.size
    K = np.empty((7, n), dtype=complex)
    K[0] = f0
    min_step = 1e-14 * max(abs(t1), 1e-30) + 1e-300

    while t1 - t > min_step:
        h = min(h, t1 - t, cfg.max_step)
        if h < min_step:
            raise StepSizeUnderflow(
                f"step size underflow at t = {t:.6e} s (h = {h:.3e} s)"
            )
        for i in range(1, 7):
            yi = y + h * (_A[i] @ K[:i])
            K[i] = rhs(t + _C[i] * h, yi, seg)
        sstat.rhs_evals += 6
        y_new = y + h * (_B @ K)
        err = h * (_E @ K)
        scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(y), np.abs(y_new))
        err_norm = _rms_norm(err / scale)
        if not math.isfinite(err_norm):
            raise NumericalError(
                f"non-finite state encountered at t = {t:.6e} s "
                f"(step {sstat.steps}, |y| max = {np.max(np.abs(y)):.3e})"
            )
        if err_norm <= 1.0:
            # accepted: emit dense-output samples inside (t, t+h]
            t_new = t + h
            hi = s_ptr
            while hi < samples.size and samples[hi] <= t_new + 1e-15 * max(abs(t_new), 1.0):
                ts = float(samples[hi])
                theta = (ts - t) / h
                if theta >= 1.0:
                    y_s = y_new if idx is None else y_new[idx]
                else:
                    w = _P @ np.array([theta, theta**2, theta**3, theta**4])
                    if idx is None:
                        y_s = y + h * (w @ K)
                    else:
                        y_s = y[idx] + h * (w @ K[:, idx])
                emit_slice(ts, y_s)
                hi += 1
            s_ptr = hi
            sstat.steps += 1
            t = t_new
            y = y_new
            K[0] = K[6]  # FSAL
            factor = _MAX_FACTOR if err_norm == 0.0 else min(
                _MAX_FACTOR, max(_MIN_FACTOR, _SAFETY * err_norm ** -0.2)
            )
            h *= factor
        else:
            sstat.rejected += 1
            h *= max(_MIN_FACTOR, _SAFETY * err_norm ** -0.2)
    return y, s_ptr


def _run_rk4(rhs, y, t0, t1, seg, cfg, samples, s_ptr, emit, sstat):
    h0 = min(cfg.initial_step, cfg.max_step)
    t = t0
    while t < t1 - 1e-15 * max(abs(t1), 1.0):
        h = min(h0, t1 - t)
        k1 = rhs(t, y, seg)
        k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1, seg)
        k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2, seg)
        k4 = rhs(t + h, y + h * k3, seg)
        sstat.rhs_evals += 4
        y_new = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(np.abs(y_new))):
            raise NumericalError(f"non-finite state at t = {t:.6e} s (rk4)")
        t_new = t + h
        f1 = rhs(t_new, y_new, seg)
        sstat.rhs_evals += 1
        hi = s_ptr
        while hi < samples.size and samples[hi] <= t_new + 1e-15 * max(abs(t_new), 1.0):
            ts = float(samples[hi])
            th = (ts - t) / h
            # cubic Hermite on [t, t+h]
            h00 = 2 * th**3 - 3 * th**2 + 1
            h10 = th**3 - 2 * th**2 + th
            h01 = -2 * th**3 + 3 * th**2
            h11 = th**3 - th**2
            y_s = h00 * y + h10 * h * k1 + h01 * y_new + h11 * h * f1
            emit(ts, y_s)
            hi += 1
        s_ptr = hi
        sstat.steps += 1
        t = t_new
        y = y_new
    return y, s_ptr


def resample(traj: Trajectory, times, channel: str | None = None):
    """Monotone-safe (PCHIP) interpolation of trajectory channels.

    Returns a dict of channel arrays, or a single array when ``channel`` is
    given.  Requested times must lie inside the sampled span.
    """
    ts = np.asarray(times, dtype=float)
    if ts.size == 0:
        return (np.empty(0) if channel is not None
                else {name: np.empty(0) for name in traj.channels})
    lo, hi = traj.times[0], traj.times[-1]
    if ts.min() < lo - 1e-15 or ts.max() > hi * (1 + 1e-12) + 1e-15:
        raise ValueError(
            f"resample times [{ts.min():.3e}, {ts.max():.3e}] outside the "
            f"trajectory span [{lo:.3e}, {hi:.3e}]"
        )
    names = [channel] if channel is not None else list(traj.channels)
    out = {}
    for name in names:
        values = traj.channels[name]
        if np.iscomplexobj(values):
            re = PchipInterpolator(traj.times, values.real, extrapolate=True)(ts)
            im = PchipInterpolator(traj.times, values.imag, extrapolate=True)(ts)
            out[name] = re + 1j * im
        else:
            interp = PchipInterpolator(traj.times, values, extrapolate=True)
            out[name] = interp(ts)
    return out[channel] if channel is not None else out
