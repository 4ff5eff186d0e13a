"""Cumulant-level simulator of a driven atomic ensemble in a lossy cavity.

Second-order mean-field dynamics of many Doppler- and coupling-inhomogeneous
atom clusters sharing one cavity mode, with pulsed transverse driving,
superradiant-burst analysis, Ramsey-lineshape scans, a frequency-lock servo
and an exact small-system reference implementation for cross-checks.
"""

__version__ = "0.1.0"

from .analysis import (AnalysisError, FLCalibration, FringeMetrics, PulseMetrics,
                       ThresholdFit, detect_threshold, fl_calibration,
                       frequency_locator, fringe_metrics, linear_fit,
                       pulse_metrics, two_pulse_population)
from .cumulant import CHANNELS, CumulantModel, Observables
from .experiments import (ExperimentConfig, ExperimentError, LineshapeScan,
                          LockRecord, LossModel, RecycleRun, ThresholdScan,
                          default_detunings, default_pulse_lengths,
                          lineshape_scan, lock_loop, recycle_run, run_trace,
                          threshold_scan)
from .grid import ClusterGrid, GridError, build_cluster_grid
from .integrator import (IntegrationStats, IntegratorConfig, NumericalError,
                         Observer, StepSizeUnderflow, Trajectory, integrate,
                         resample)
from .oracle import (DensityOperator, OracleError, OracleSystem,
                     build_liouvillian_action, cutoff_stability, evolve_density,
                     final_density, ground_density, product_density)
from .params import (PhysicalParams, doppler_sigma_from_temperature,
                     standard_params)
from .pulses import (PulseSequence, SequenceError, Segment, ramsey,
                     single_pulse)

__all__ = [
    "__version__",
    "AnalysisError", "FLCalibration", "FringeMetrics", "PulseMetrics",
    "ThresholdFit", "detect_threshold", "fl_calibration", "frequency_locator",
    "fringe_metrics", "linear_fit", "pulse_metrics", "two_pulse_population",
    "CHANNELS", "CumulantModel", "Observables",
    "ExperimentConfig", "ExperimentError", "LineshapeScan", "LockRecord",
    "LossModel", "RecycleRun", "ThresholdScan", "default_detunings",
    "default_pulse_lengths", "lineshape_scan", "lock_loop", "recycle_run",
    "run_trace", "threshold_scan",
    "ClusterGrid", "GridError", "build_cluster_grid",
    "IntegrationStats", "IntegratorConfig", "NumericalError", "Observer",
    "StepSizeUnderflow", "Trajectory", "integrate", "resample",
    "DensityOperator", "OracleError", "OracleSystem", "build_liouvillian_action",
    "cutoff_stability", "evolve_density", "final_density", "ground_density",
    "product_density",
    "PhysicalParams", "doppler_sigma_from_temperature", "standard_params",
    "PulseSequence", "SequenceError", "Segment", "ramsey", "single_pulse",
]
