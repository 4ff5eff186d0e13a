"""Cluster discretization of the inhomogeneous ensemble.

Atoms are binned into clusters on a (coupling-phase x Doppler) grid.  All
atoms of a cluster share one signed coupling g_c, one Doppler shift and one
multiplicity n_c; the cumulant equations treat atoms within a cluster as
exchangeable.

* Coupling phases phi are placed with the midpoint rule on [0, pi] and
  g_c = g_max * eta * cos(phi).  The node set is built by explicit mirroring
  so the +g/-g symmetry of the standing wave is exact in the node values;
  the weighted sum sum_c n_c g_c cancels to a few units of rounding (the
  summation order of the accumulator decides the final ulps).
* Doppler shifts use Gauss-Hermite quadrature of the thermal Gaussian of RMS
  width ``doppler_sigma``; a width of zero collapses to a single node.
* A single phase node cannot represent cos(phi) by its midpoint value
  (cos(pi/2) = 0), so that degenerate case falls back to the RMS coupling
  g_max * eta / sqrt(2), preserving the ensemble-mean of g^2.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .params import PhysicalParams


class GridError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ClusterGrid:
    g: np.ndarray             # (M,) signed couplings, rad/s
    doppler: np.ndarray       # (M,) Doppler shifts, rad/s
    multiplicity: np.ndarray  # (M,) atoms per cluster, > 0, sums to n_atoms
    n_phase: int | None = field(default=None)
    n_doppler: int | None = field(default=None)

    def __post_init__(self) -> None:
        g = np.atleast_1d(np.asarray(self.g, dtype=float))
        dopp = np.atleast_1d(np.asarray(self.doppler, dtype=float))
        mult = np.atleast_1d(np.asarray(self.multiplicity, dtype=float))
        if not (g.shape == dopp.shape == mult.shape) or g.ndim != 1:
            raise GridError("g, doppler and multiplicity must be 1-d arrays of equal length")
        if g.size == 0:
            raise GridError("grid must contain at least one cluster")
        if not np.all(mult > 0.0):
            raise GridError("cluster multiplicities must be positive")
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(dopp)) and np.all(np.isfinite(mult))):
            raise GridError("grid arrays must be finite")
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "doppler", dopp)
        object.__setattr__(self, "multiplicity", mult)

    @property
    def n_clusters(self) -> int:
        return self.g.size

    @property
    def n_atoms(self) -> float:
        return float(self.multiplicity.sum())

    def mean_coupling_sq(self, g_max: float) -> float:
        """Multiplicity-weighted mean of (g_c / g_max)^2."""
        w = self.multiplicity / self.multiplicity.sum()
        return float(np.sum(w * (self.g / g_max) ** 2))


def _phase_cosines(n_phase: int) -> np.ndarray:
    """Midpoint-rule cos(phi) nodes on [0, pi], mirrored exactly."""
    half = n_phase // 2
    k = np.arange(half)
    c = np.cos((k + 0.5) * np.pi / n_phase)
    if n_phase % 2:
        return np.concatenate([c, [0.0], -c[::-1]])
    return np.concatenate([c, -c[::-1]])


def build_cluster_grid(
    params: PhysicalParams, n_phase: int, n_doppler: int
) -> ClusterGrid:
    """Build the (phase x Doppler) cluster grid for ``params``.

    Multiplicities are uniform across phase nodes and Gauss-Hermite weighted
    across Doppler nodes; they sum to ``params.n_atoms`` exactly (weights are
    renormalized after quadrature).
    """
    if n_phase < 1 or n_doppler < 1:
        raise GridError(f"n_phase and n_doppler must be >= 1, got {n_phase}, {n_doppler}")

    if n_phase == 1:
        warnings.warn(
            "degenerate single-phase grid: using the RMS coupling g_max*eta/sqrt(2) "
            "instead of the midpoint value cos(pi/2) = 0",
            UserWarning,
            stacklevel=2,
        )
        cosines = np.array([1.0 / np.sqrt(2.0)])
    else:
        cosines = _phase_cosines(n_phase)
    g_phase = params.g_eff * cosines

    if params.doppler_sigma == 0.0 or n_doppler == 1:
        dopp_nodes = np.array([0.0])
        dopp_weights = np.array([1.0])
    else:
        x, w = np.polynomial.hermite.hermgauss(n_doppler)
        dopp_nodes = np.sqrt(2.0) * params.doppler_sigma * x
        dopp_weights = w / w.sum()

    g = np.repeat(g_phase, dopp_weights.size)
    doppler = np.tile(dopp_nodes, g_phase.size)
    weights = np.tile(dopp_weights, g_phase.size) / n_phase
    multiplicity = params.n_atoms * (weights / weights.sum())

    return ClusterGrid(
        g=g,
        doppler=doppler,
        multiplicity=multiplicity,
        n_phase=n_phase,
        n_doppler=1 if params.doppler_sigma == 0.0 else n_doppler,
    )
