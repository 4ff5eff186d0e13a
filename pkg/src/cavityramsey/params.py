"""Physical parameters of the driven atom-cavity system.

All quantities are stored internally as angular frequencies (rad/s) and SI
times.  Configuration files use ordinary frequencies in Hz; the conversion
happens once at parse time (see :mod:`cavityramsey.config`).

Conventions
-----------
* ``kappa`` is the intra-cavity *photon number* decay rate: for an empty
  cavity d<a+a>/dt = -kappa <a+a>.
* ``gamma`` is the excited-state population decay rate (1/lifetime).
* ``delta_a`` is the laser detuning from the bare atomic transition,
  delta_a = omega_laser - omega_atom.
* ``delta_cavity`` is the cavity detuning from the atomic transition,
  delta_cavity = omega_cavity - omega_atom (0 when the cavity is locked to
  the atoms).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from scipy import constants as _const

TWO_PI = 2.0 * math.pi

# 1S0 - 3P1 intercombination line of 88-Sr.
TRANSITION_WAVELENGTH = 689e-9  # m
SR88_MASS = 87.9056121 * _const.atomic_mass  # kg


def doppler_sigma_from_temperature(
    temperature: float,
    mass: float = SR88_MASS,
    wavelength: float = TRANSITION_WAVELENGTH,
) -> float:
    """RMS Doppler shift (rad/s) of a thermal cloud along one axis.

    sigma = k * sqrt(kB T / m) with k = 2 pi / lambda.  At 2 uK this gives
    2 pi x 20 kHz for the parameters above.
    """
    if temperature < 0.0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    if temperature == 0.0:
        return 0.0
    v_rms = math.sqrt(_const.Boltzmann * temperature / mass)
    return TWO_PI / wavelength * v_rms


@dataclass(frozen=True)
class PhysicalParams:
    """Parameter record for one run.  All rates/detunings in rad/s."""

    kappa: float                      # cavity photon decay rate
    gamma: float                      # atomic population decay rate
    g_max: float                      # peak single-atom coupling
    n_atoms: float                    # total atom number (may be fractional)
    rabi: float                       # drive Rabi frequency of the pump
    delta_a: float = 0.0              # laser - atom detuning
    delta_cavity: float = 0.0         # cavity - atom detuning
    doppler_sigma: float = 0.0        # RMS Doppler width
    coupling_efficiency: float = 1.0  # global reduction of g_max (cloud size etc.)

    def __post_init__(self) -> None:
        if not (self.kappa > 0.0 and math.isfinite(self.kappa)):
            raise ValueError(f"kappa must be positive and finite, got {self.kappa}")
        for name in ("gamma", "g_max", "rabi", "doppler_sigma"):
            value = getattr(self, name)
            if not (value >= 0.0 and math.isfinite(value)):
                raise ValueError(f"{name} must be >= 0 and finite, got {value}")
        for name in ("delta_a", "delta_cavity"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not self.n_atoms >= 1.0:
            raise ValueError(f"n_atoms must be >= 1, got {self.n_atoms}")
        if not 0.0 < self.coupling_efficiency <= 1.0:
            raise ValueError(
                f"coupling_efficiency must be in (0, 1], got {self.coupling_efficiency}"
            )

    @property
    def g_eff(self) -> float:
        """Effective peak coupling g_max * coupling_efficiency."""
        return self.g_max * self.coupling_efficiency

    @property
    def collective_rate(self) -> float:
        """Collective vacuum-Rabi rate 2 g_eff sqrt(N) (rad/s)."""
        return 2.0 * self.g_eff * math.sqrt(self.n_atoms)

    @property
    def is_oscillatory(self) -> bool:
        """True when the ensemble is in the oscillatory regime 2 g_eff sqrt(N) > kappa."""
        return self.collective_rate > self.kappa

    @property
    def cooperativity(self) -> float:
        """Single-atom cooperativity 4 g_eff^2 / (kappa gamma)."""
        if self.gamma == 0.0:
            return math.inf
        return 4.0 * self.g_eff**2 / (self.kappa * self.gamma)

    def with_atoms(self, n_atoms: float) -> "PhysicalParams":
        return replace(self, n_atoms=n_atoms)


def standard_params(**overrides) -> PhysicalParams:
    """The standard operating point used throughout the test suite.

    kappa/2pi = 780 kHz, Omega/2pi = 833.3 kHz (pi/2 area in 300 ns),
    g_max/2pi = 450 Hz, gamma = 1/(22 us), N = 2e7, Doppler width from a
    2 uK cloud.
    """
    values = dict(
        kappa=TWO_PI * 780e3,
        gamma=1.0 / 22e-6,
        g_max=TWO_PI * 450.0,
        n_atoms=2e7,
        rabi=TWO_PI * 833.333e3,
        delta_a=0.0,
        delta_cavity=0.0,
        doppler_sigma=doppler_sigma_from_temperature(2e-6),
        coupling_efficiency=1.0,
    )
    values.update(overrides)
    return PhysicalParams(**values)
