"""Piecewise-constant drive sequences.

A sequence is a list of segments, each with a duration, a Rabi amplitude, a
drive phase and a laser detuning.  Segment boundaries are hard edges: the
integrator restarts there and never interpolates across them.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

import numpy as np


class SequenceError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    duration: float        # s
    rabi: float = 0.0      # rad/s, drive Rabi frequency (0 = free evolution)
    phase: float = 0.0     # rad, drive phase
    delta_a: float = 0.0   # rad/s, laser - atom detuning during the segment

    def __post_init__(self) -> None:
        if not (self.duration > 0.0 and math.isfinite(self.duration)):
            raise SequenceError(f"segment duration must be positive, got {self.duration}")
        if not (self.rabi >= 0.0 and math.isfinite(self.rabi)):
            raise SequenceError(f"segment rabi must be >= 0, got {self.rabi}")

    @property
    def eta(self) -> complex:
        """Complex half-amplitude (Omega/2) e^{i phase} of the drive term."""
        return 0.5 * self.rabi * cmath.exp(1j * self.phase)


@dataclass(frozen=True, eq=False)
class PulseSequence:
    segments: tuple[Segment, ...]
    sample_dt: float  # s, spacing of the dense observable samples

    def __post_init__(self) -> None:
        if len(self.segments) == 0:
            raise SequenceError("sequence must contain at least one segment")
        if not (self.sample_dt > 0.0 and math.isfinite(self.sample_dt)):
            raise SequenceError(f"sample_dt must be positive, got {self.sample_dt}")
        object.__setattr__(self, "segments", tuple(self.segments))
        if not math.isfinite(self.total_duration):
            raise SequenceError("total sequence duration must be finite")

    @property
    def edges(self) -> np.ndarray:
        """Segment boundary times including 0 and the total duration."""
        return np.concatenate([[0.0], np.cumsum([s.duration for s in self.segments])])

    @property
    def total_duration(self) -> float:
        return float(sum(s.duration for s in self.segments))

    @property
    def last_pulse_end(self) -> float:
        """End time of the last driven (rabi > 0) segment; 0.0 if none."""
        edges = self.edges
        t_end = 0.0
        for k, seg in enumerate(self.segments):
            if seg.rabi > 0.0:
                t_end = float(edges[k + 1])
        return t_end

    def segment_index(self, t: float) -> int:
        """Active segment at time t (right-continuous; t == total maps to the last)."""
        total = self.total_duration
        if not 0.0 <= t <= total:
            raise SequenceError(f"t = {t} outside the sequence span [0, {total}]")
        idx = int(np.searchsorted(self.edges, t, side="right")) - 1
        return min(idx, len(self.segments) - 1)


def drive_amplitude(seq: PulseSequence, t: float) -> tuple[complex, float]:
    """(complex half-amplitude, delta_a) of the segment active at time t."""
    seg = seq.segments[seq.segment_index(t)]
    return seg.eta, seg.delta_a


def single_pulse(
    duration: float,
    rabi: float,
    readout: float,
    sample_dt: float,
    phase: float = 0.0,
    delta_a: float = 0.0,
) -> PulseSequence:
    """One pump pulse followed by a free readout window (dropped if zero)."""
    segments = [Segment(duration, rabi, phase, delta_a)]
    if readout > 0.0:
        segments.append(Segment(readout, 0.0, 0.0, delta_a))
    return PulseSequence(segments=tuple(segments), sample_dt=sample_dt)


def ramsey(
    ramsey_time: float,
    rabi: float,
    readout: float,
    sample_dt: float,
    tau_pulse: float | None = None,
    delta_a: float = 0.0,
    spacing: str = "center",
) -> PulseSequence:
    """Two pi/2 pulses separated by free evolution, then a readout window.

    ``spacing="center"`` (default) interprets ``ramsey_time`` as the
    center-to-center separation of the two pulses, which is what sets the
    fringe rate of the finite-pulse interference pattern; ``spacing="gap"``
    uses it as the bare free-evolution gap.
    """
    if tau_pulse is None:
        if rabi <= 0.0:
            raise SequenceError("tau_pulse can only be derived from a positive rabi")
        tau_pulse = 0.5 * math.pi / rabi
    if spacing == "center":
        gap = ramsey_time - tau_pulse
    elif spacing == "gap":
        gap = ramsey_time
    else:
        raise SequenceError(f"spacing must be 'center' or 'gap', got {spacing!r}")
    if gap <= 0.0:
        raise SequenceError(
            f"ramsey_time {ramsey_time} leaves no room between pulses of {tau_pulse}"
        )
    segments = [
        Segment(tau_pulse, rabi, 0.0, delta_a),
        Segment(gap, 0.0, 0.0, delta_a),
        Segment(tau_pulse, rabi, 0.0, delta_a),
    ]
    if readout > 0.0:
        segments.append(Segment(readout, 0.0, 0.0, delta_a))
    return PulseSequence(segments=tuple(segments), sample_dt=sample_dt)
