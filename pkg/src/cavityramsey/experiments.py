"""End-to-end protocols: traces, scans, frequency lock, ensemble recycling.

Every protocol is deterministic given its configuration; randomness exists
only in the optional laser-noise model of the lock loop and flows from one
seed.  Scan points are independent and may run in a process pool; results
are assembled by index so the worker count never changes the output.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .analysis import (AnalysisError, FLCalibration, FringeMetrics, PulseMetrics,
                       ThresholdFit, detect_threshold, fl_calibration,
                       fringe_metrics, frequency_locator, pulse_metrics,
                       two_pulse_population)
from .cumulant import CumulantModel
from .grid import build_cluster_grid
from .integrator import IntegratorConfig, Trajectory, integrate
from .params import PhysicalParams, standard_params
from .pulses import PulseSequence, ramsey, single_pulse


class ExperimentError(RuntimeError):
    pass


_LOSS_DEFAULTS = {          # time constants of the three recycling modes, s
    "pulsed-ramsey": 0.313,
    "no-pulses": 0.431,
    "mot-continuous": 0.409,
}


@dataclass(frozen=True)
class LossModel:
    mode: str = "pulsed-ramsey"
    tau_loss: float | None = None     # s; None = the mode's default constant
    survival: float | None = None     # per-sequence survival; overrides tau_loss

    def __post_init__(self) -> None:
        if self.mode not in _LOSS_DEFAULTS:
            raise ExperimentError(
                f"loss mode must be one of {sorted(_LOSS_DEFAULTS)}, got {self.mode!r}"
            )
        if self.survival is not None and not 0.0 < self.survival <= 1.0:
            raise ExperimentError(f"survival must be in (0, 1], got {self.survival}")
        if self.tau_loss is not None and self.tau_loss <= 0.0:
            raise ExperimentError(f"tau_loss must be positive, got {self.tau_loss}")

    def per_cycle_survival(self, cycle_time: float) -> float:
        if self.survival is not None:
            return self.survival
        tau = self.tau_loss if self.tau_loss is not None else _LOSS_DEFAULTS[self.mode]
        return math.exp(-cycle_time / tau)

    @property
    def effective_tau(self) -> float:
        return self.tau_loss if self.tau_loss is not None else _LOSS_DEFAULTS[self.mode]


@dataclass(frozen=True)
class ExperimentConfig:
    params: PhysicalParams = field(default_factory=standard_params)
    n_phase: int = 16
    n_doppler: int = 6
    frame: str = "atom"
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    sample_dt: float = 2e-8           # s
    readout: float = 10e-6            # s, free window after the last pulse
    pulse_area_over_pi: float = 1.0   # single-trace pump area / pi
    tau_pulse: float = 300e-9         # s, Ramsey pulse length
    ramsey_time: float = 5e-6         # s, center-to-center pulse separation
    ramsey_spacing: str = "center"
    floor_fraction: float = 0.01      # no-burst floor / pi-pulse peak
    # lock loop
    servo_gain: float = 0.5
    step_fraction: float = 0.1        # frequency step / FRR
    n_pulses: int = 108
    initial_offset_hz: float = 0.0
    laser_noise_hz: float = 0.0       # per-sequence random-walk step
    rng_seed: int = 0
    lock_mode: str = "interp"         # "interp" (lineshape lookup) or "full"
    # recycling
    loss: LossModel = field(default_factory=LossModel)
    cycle_time: float = 2e-3          # s
    n_min_atoms: float = 1e3
    threads: int = 1

    def __post_init__(self) -> None:
        if self.readout < 5.0 / self.params.kappa:
            raise ExperimentError(
                f"readout window {self.readout:.2e} s is shorter than 5/kappa = "
                f"{5.0 / self.params.kappa:.2e} s; the cavity cannot ring down"
            )
        if self.sample_dt <= 0.0:
            raise ExperimentError("sample_dt must be positive")
        if self.tau_pulse <= 0.0 or self.ramsey_time <= 0.0:
            raise ExperimentError("tau_pulse and ramsey_time must be positive")
        if self.lock_mode not in ("interp", "full"):
            raise ExperimentError(f"lock_mode must be 'interp' or 'full', got {self.lock_mode!r}")
        if self.threads < 1:
            raise ExperimentError("threads must be >= 1")
        if self.n_pulses < 2 or self.n_pulses % 2:
            raise ExperimentError("n_pulses must be an even count >= 2")


# ----- shared machinery --------------------------------------------------

def _integrate_sequence(cfg: ExperimentConfig, params: PhysicalParams,
                        seq: PulseSequence) -> Trajectory:
    grid = build_cluster_grid(params, cfg.n_phase, cfg.n_doppler)
    model = CumulantModel(params, grid, frame=cfg.frame)
    return integrate(model.rhs, model.initial_state(), seq, cfg.integrator,
                     observer=model.observer())


def _pi_reference(cfg: ExperimentConfig, params: PhysicalParams) -> PulseMetrics:
    """Metrics of the pi-pulse trace that anchors the no-burst floor."""
    seq = single_pulse(math.pi / params.rabi, params.rabi, cfg.readout, cfg.sample_dt)
    traj = _integrate_sequence(cfg, params, seq)
    return pulse_metrics(traj, seq.last_pulse_end)


def _pulse_point(cfg: ExperimentConfig, t_p: float, floor: float) -> PulseMetrics:
    params = cfg.params
    seq = single_pulse(t_p, params.rabi, cfg.readout, cfg.sample_dt)
    traj = _integrate_sequence(cfg, params, seq)
    return pulse_metrics(traj, seq.last_pulse_end, floor)


def _ramsey_point(cfg: ExperimentConfig, delta_hz: float, floor: float,
                  n_atoms: float | None = None) -> PulseMetrics:
    params = dataclasses.replace(cfg.params, delta_a=2.0 * math.pi * delta_hz)
    if n_atoms is not None:
        params = params.with_atoms(n_atoms)
    seq = ramsey(cfg.ramsey_time, params.rabi, cfg.readout, cfg.sample_dt,
                 tau_pulse=cfg.tau_pulse, spacing=cfg.ramsey_spacing)
    traj = _integrate_sequence(cfg, params, seq)
    return pulse_metrics(traj, seq.last_pulse_end, floor)


def _map_points(fn, jobs, threads: int):
    """Order-preserving map, serial or over a process pool."""
    if threads <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs, chunksize=1))


# module-level adapters so the pool can pickle the work items
def _pulse_job(args):
    cfg, t_p, floor = args
    return _pulse_point(cfg, t_p, floor)


def _ramsey_job(args):
    cfg, delta_hz, floor = args
    return _ramsey_point(cfg, delta_hz, floor)


# ----- protocols ---------------------------------------------------------

def run_trace(cfg: ExperimentConfig, floor: float = 0.0
              ) -> tuple[Trajectory, PulseMetrics]:
    """Single pump pulse of area ``pulse_area_over_pi * pi`` plus readout."""
    params = cfg.params
    t_p = cfg.pulse_area_over_pi * math.pi / params.rabi
    seq = single_pulse(t_p, params.rabi, cfg.readout, cfg.sample_dt)
    traj = _integrate_sequence(cfg, params, seq)
    return traj, pulse_metrics(traj, seq.last_pulse_end, floor)


@dataclass(eq=False)
class ThresholdScan:
    pulse_lengths: np.ndarray            # s
    sin2_proxy: np.ndarray
    metrics: list[PulseMetrics]
    threshold: ThresholdFit
    floor: float
    pi_peak: float
    pi_area: float

    def rows(self):
        for t_p, s2, m in zip(self.pulse_lengths, self.sin2_proxy, self.metrics):
            yield (t_p, s2, *m.as_row(), m.peak_rate / self.pi_peak,
                   m.area / self.pi_area)


def default_pulse_lengths(params: PhysicalParams, n: int = 21) -> np.ndarray:
    """Pump-length grid for threshold scans: coarse over [0.1, 1.1] pi plus a
    fine band around the turn-on knee, where the midpoint threshold estimate
    needs ~0.01 pi resolution."""
    areas = np.concatenate([np.linspace(0.1, 1.1, n),
                            np.arange(0.45, 0.6501, 0.01)])
    areas = np.unique(np.round(areas, 6))
    return areas * math.pi / params.rabi


def threshold_scan(cfg: ExperimentConfig,
                   pulse_lengths: np.ndarray | None = None) -> ThresholdScan:
    """Excitation-angle scan: burst metrics and threshold vs pump length."""
    if pulse_lengths is None:
        pulse_lengths = default_pulse_lengths(cfg.params)
    pulse_lengths = np.sort(np.asarray(pulse_lengths, dtype=float))
    if pulse_lengths.size == 0:
        raise ExperimentError("empty pulse-length grid")

    ref = _pi_reference(cfg, cfg.params)
    floor = cfg.floor_fraction * ref.peak_rate
    jobs = [(cfg, float(t_p), floor) for t_p in pulse_lengths]
    metrics = _map_points(_pulse_job, jobs, cfg.threads)
    sin2 = np.sin(0.5 * cfg.params.rabi * pulse_lengths) ** 2
    # the proxy folds back above area pi; fit the threshold on the rising branch
    rising = cfg.params.rabi * pulse_lengths <= math.pi * (1.0 + 1e-12)
    fit = detect_threshold([(s, m) for s, m, keep
                            in zip(sin2, metrics, rising) if keep])
    return ThresholdScan(pulse_lengths, sin2, metrics, fit, floor,
                         ref.peak_rate, ref.area)


@dataclass(eq=False)
class LineshapeScan:
    detunings: np.ndarray                # Hz
    metrics: list[PulseMetrics]
    reference_population: np.ndarray     # analytic two-pulse populations
    fringe: FringeMetrics | None         # None when the scan is too narrow
    floor: float
    pi_peak: float

    def table(self) -> list[tuple[float, PulseMetrics]]:
        return list(zip(self.detunings, self.metrics))

    def rows(self):
        for d, m, ref in zip(self.detunings, self.metrics, self.reference_population):
            yield (d, *m.as_row(), ref)


def default_detunings(inner_span: float = 6.5e5, inner_step: float = 5e3,
                      outer_span: float = 2.3e6, outer_step: float = 1.25e4
                      ) -> np.ndarray:
    """Two-tier detuning grid (Hz): fine near the fringes, coarser wings
    (still several samples per fringe so wing maxima refine cleanly)."""
    inner = np.arange(-inner_span, inner_span + 0.5 * inner_step, inner_step)
    wing = np.arange(inner_span + outer_step, outer_span + 0.5 * outer_step, outer_step)
    return np.unique(np.concatenate([-wing[::-1], inner, wing]))


def lineshape_scan(cfg: ExperimentConfig,
                   detunings: np.ndarray | None = None,
                   with_fringe_metrics: bool = True,
                   readout_scan: ThresholdScan | None = None) -> LineshapeScan:
    """Peak superradiant emission vs laser detuning of a Ramsey sequence.

    ``readout_scan`` (an excitation scan of the same configuration) supplies
    the measured excitation-to-peak response; the envelope fit then works on
    readout-linearized maxima instead of approximating the response as
    affine.
    """
    if detunings is None:
        detunings = default_detunings()
    detunings = np.asarray(detunings, dtype=float)
    if detunings.size == 0:
        raise ExperimentError("empty detuning grid")

    ref = _pi_reference(cfg, cfg.params)
    floor = cfg.floor_fraction * ref.peak_rate
    jobs = [(cfg, float(d), floor) for d in detunings]
    metrics = _map_points(_ramsey_job, jobs, cfg.threads)
    gap = (cfg.ramsey_time - cfg.tau_pulse if cfg.ramsey_spacing == "center"
           else cfg.ramsey_time)
    ref_pop = np.array([
        two_pulse_population(2.0 * math.pi * d, cfg.params.rabi, cfg.tau_pulse, gap)
        for d in detunings
    ])
    fringe = None
    if with_fringe_metrics:
        readout = None
        if readout_scan is not None:
            rising = (cfg.params.rabi * readout_scan.pulse_lengths
                      <= math.pi * (1.0 + 1e-12))
            readout = [(float(s), float(m.peak_rate)) for s, m, keep in
                       zip(readout_scan.sin2_proxy, readout_scan.metrics,
                           rising) if keep]
        fringe = fringe_metrics(list(zip(detunings, metrics)), cfg.ramsey_time,
                                cfg.tau_pulse, cfg.params.rabi, floor=floor,
                                readout=readout)
    return LineshapeScan(detunings, metrics, ref_pop, fringe, floor, ref.peak_rate)


# ----- lock loop ---------------------------------------------------------

@dataclass(eq=False)
class LockRecord:
    commanded_hz: np.ndarray      # per pulse: commanded laser detuning
    true_offset_hz: np.ndarray    # per pulse: commanded + laser noise
    peaks: np.ndarray             # per pulse: peak photon rate
    atom_numbers: np.ndarray      # per pulse
    fl_values: np.ndarray         # per pair
    corrections_hz: np.ndarray    # per pair: servo corrections applied
    center_hz: np.ndarray         # per pair: servo center after correction
    residual_mean_hz: float       # center statistics over the settled final
    residual_std_hz: float        # half of the pairs (transient excluded)
    n_excluded_pairs: int


def lock_loop(cfg: ExperimentConfig,
              calibration: FLCalibration | None = None,
              lineshape: LineshapeScan | None = None) -> LockRecord:
    """Closed-loop interrogation: symmetric stepping, FL feedback on pairs.

    ``interp`` mode reads peak rates off a precomputed lineshape (supplied
    or computed here); ``full`` mode integrates every interrogation.  The
    servo state is the center detuning c; pulse 2k runs at c - step/2,
    pulse 2k+1 at c + step/2, and after each pair the correction
    -gain * calibration^-1(FL) is applied to c.
    """
    frr = 1.0 / cfg.ramsey_time
    step = cfg.step_fraction * frr
    if lineshape is None and (cfg.lock_mode == "interp" or calibration is None):
        span = 0.55 * frr
        grid = np.arange(-span, span + 2.4e3, 2.5e3)
        lineshape = lineshape_scan(cfg, grid, with_fringe_metrics=False)
    if calibration is None:
        calibration = fl_calibration(lineshape.table(), step, cfg.ramsey_time,
                                     rabi=cfg.params.rabi, tau_pulse=cfg.tau_pulse)

    peak_interp = None
    if cfg.lock_mode == "interp":
        from scipy.interpolate import PchipInterpolator
        peak_interp = PchipInterpolator(lineshape.detunings,
                                        [m.peak_rate for m in lineshape.metrics])
        lo, hi = lineshape.detunings[0], lineshape.detunings[-1]

    rng = np.random.default_rng(cfg.rng_seed)
    noise = 0.0
    center = cfg.initial_offset_hz
    floor = (lineshape.floor if lineshape is not None else 0.0)

    n = cfg.n_pulses
    commanded = np.empty(n)
    true_off = np.empty(n)
    peaks = np.empty(n)
    atoms = np.empty(n)
    fls = []
    corrections = []
    centers = []
    n_atoms = cfg.params.n_atoms
    survival = cfg.loss.per_cycle_survival(cfg.cycle_time)
    scale_exponent = 1.0  # peak ~ N in the oscillatory regime; captured below
    if survival < 1.0:
        scale_exponent = _peak_scaling_exponent(cfg)

    for k in range(n):
        delta_cmd = center + (0.5 * step if k % 2 else -0.5 * step)
        if cfg.laser_noise_hz > 0.0:
            noise += rng.normal(0.0, cfg.laser_noise_hz)
        x = delta_cmd + noise
        if peak_interp is not None:
            if not lo <= x <= hi:
                raise ExperimentError(
                    f"lock excursion to {x:.1f} Hz leaves the lineshape support "
                    f"[{lo:.1f}, {hi:.1f}] Hz at pulse {k}"
                )
            pk = float(peak_interp(x)) * (n_atoms / cfg.params.n_atoms) ** scale_exponent
        else:
            pk = _ramsey_point(cfg, x, 0.0, n_atoms=n_atoms).peak_rate
        commanded[k] = delta_cmd
        true_off[k] = x
        peaks[k] = pk
        atoms[k] = n_atoms
        if k % 2:
            if peaks[k - 1] < floor and peaks[k] < floor:
                # dark pair (both interrogations in a zero zone): no FL
                # information, hold the servo center
                fls.append(math.nan)
                corrections.append(0.0)
            else:
                pair = frequency_locator([peaks[k - 1], peaks[k]], floor=floor)
                fls.append(pair.value)
                est = calibration.detuning_from_fl(pair.value)
                corr = -cfg.servo_gain * est
                center += corr
                corrections.append(corr)
            centers.append(center)
        n_atoms *= survival
        if n_atoms < cfg.n_min_atoms:
            raise ExperimentError(
                f"atom number fell to {n_atoms:.3e} (< {cfg.n_min_atoms:.1e}) "
                f"at pulse {k}"
            )

    fls = np.array(fls)
    centers = np.array(centers)
    settled = centers[centers.size // 2:]
    return LockRecord(
        commanded_hz=commanded,
        true_offset_hz=true_off,
        peaks=peaks,
        atom_numbers=atoms,
        fl_values=fls,
        corrections_hz=np.array(corrections),
        center_hz=centers,
        residual_mean_hz=float(np.mean(settled)),
        residual_std_hz=float(np.std(settled)),
        n_excluded_pairs=int(np.sum(np.isnan(fls))),
    )


def _peak_scaling_exponent(cfg: ExperimentConfig, ratio: float = 0.7) -> float:
    """log-log slope of resonant peak rate vs atom number, captured from two
    direct simulations (used to scale lineshape lookups under atom loss)."""
    m1 = _ramsey_point(cfg, 0.0, 0.0)
    m2 = _ramsey_point(cfg, 0.0, 0.0, n_atoms=cfg.params.n_atoms * ratio)
    if m1.peak_rate <= 0.0 or m2.peak_rate <= 0.0:
        raise ExperimentError("cannot capture peak-vs-N scaling: no emission")
    return math.log(m1.peak_rate / m2.peak_rate) / math.log(1.0 / ratio)


# ----- recycling ---------------------------------------------------------

@dataclass(eq=False)
class RecycleRun:
    times: np.ndarray          # s, start of each cycle
    atom_numbers: np.ndarray
    peaks: np.ndarray          # zero when pulses are blocked
    mode: str
    tau_loss: float            # s, the configured constant
    scaling_exponent: float


def recycle_run(cfg: ExperimentConfig, n_sequences: int) -> RecycleRun:
    """Repeated interrogation cycles with ensemble decay between them.

    Cooling resets coherences, so each cycle is an independent sequence at
    the current atom number; peaks follow the captured peak-vs-N scaling of
    one reference simulation pair rather than a full re-integration per
    cycle.
    """
    if n_sequences < 1:
        raise ExperimentError("n_sequences must be >= 1")
    survival = cfg.loss.per_cycle_survival(cfg.cycle_time)
    pulsed = cfg.loss.mode != "no-pulses"
    exponent = 1.0
    peak0 = 0.0
    if pulsed:
        exponent = _peak_scaling_exponent(cfg)
        peak0 = _ramsey_point(cfg, 0.0, 0.0).peak_rate
    times = np.arange(n_sequences) * cfg.cycle_time
    n0 = cfg.params.n_atoms
    atom_numbers = n0 * survival ** np.arange(n_sequences)
    if atom_numbers[-1] < cfg.n_min_atoms:
        k = int(np.argmax(atom_numbers < cfg.n_min_atoms))
        raise ExperimentError(
            f"atom number underflows the configured minimum {cfg.n_min_atoms:.1e} "
            f"at cycle {k} (t = {times[k]:.3f} s); shorten the run"
        )
    peaks = (peak0 * (atom_numbers / n0) ** exponent if pulsed
             else np.zeros(n_sequences))
    return RecycleRun(times, atom_numbers, peaks, cfg.loss.mode,
                      cfg.loss.effective_tau, exponent if pulsed else float("nan"))
