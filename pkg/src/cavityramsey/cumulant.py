"""Second-order cumulant equations for clustered atoms in a driven cavity.

Model: M atom clusters (signed coupling g_c, detuning shift d_c, multiplicity
n_c) coupled to one cavity mode, with a classical transverse drive that hits
every atom with the same phase.  In a frame rotating at ``omega_frame`` the
Hamiltonian is

    H = Dc a'a + sum_c n_c [ d_c ee_c + g_c (a' s-_c + a s+_c) ]
        + sum_c n_c [ eta(t) s+_c + h.c. ],      eta(t) = (rabi/2) e^{i phase} e^{-i r t}

with dissipators sqrt(kappa) a and sqrt(gamma) s-_i per atom.  Two frame
choices are supported:

* ``frame="atom"``   -- Dc = delta_cavity, d_c = doppler_c, and the drive
  oscillates at the full laser-atom detuning r = delta_a + segment.delta_a.
  Free evolution is slow in this frame, which makes detuning scans cheap
  (the integrator's step size is not limited by the scan detuning).
* ``frame="laser"``  -- Dc = delta_cavity - delta_a, d_c = doppler_c - delta_a,
  r = segment.delta_a (zero for plain sequences, so eta is static).

All five reported observables are frame invariant, so the two choices must
agree; this is exercised in the tests.

State layout (complex vector, length 3 + 5M + 4M^2):

    [0]                 <a>
    [1]                 <a a>
    [2]                 <a'a>
    [3      : 3+M]      <s-_c>
    [3+M    : 3+2M]     <ee_c>
    [3+2M   : 3+3M]     <a s-_c>
    [3+3M   : 3+4M]     <a' s-_c>
    [3+4M   : 3+5M]     <a ee_c>
    then four M x M blocks, row index c, column index d, C order:
        PM[c,d] = <s+_c s-_d>   (Hermitian)
        MM[c,d] = <s-_c s-_d>   (symmetric)
        EE[c,d] = <ee_c ee_d>   (real symmetric)
        EM[c,d] = <ee_c s-_d>

Pair blocks always refer to *distinct* atoms; the diagonal c = d holds the
distinct-pair moment within one cluster, and the single-particle equations
count pair partners with the n_c - 1 bookkeeping (implemented as the matrix
product with w = n*g minus the g_c * diagonal term).

Third-order moments are closed with

    <ABC> ~= <AB><C> + <AC><B> + <BC><A> - 2<A><B><C>.

The right-hand side is arranged so that exact structural properties survive
floating point: derivatives of <a'a>, <ee> and EE are exactly real, PM stays
exactly Hermitian and MM/EE exactly symmetric (each is updated as T + T'),
so no re-symmetrization is ever needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import ClusterGrid, build_cluster_grid
from .integrator import Observer
from .params import PhysicalParams
from .pulses import PulseSequence, Segment

CHANNELS = (
    "photon_rate",
    "intracavity_photons",
    "mean_inversion",
    "collective_coherence",
    "total_excitation",
)


@dataclass(frozen=True)
class Observables:
    photon_rate: float           # kappa * <a'a>, 1/s
    intracavity_photons: float   # <a'a>
    mean_inversion: float        # multiplicity-weighted mean <ee>
    collective_coherence: float  # |sum_c n_c (g_c/g_ref) <s-_c>|
    total_excitation: float      # <a'a> + sum_c n_c <ee_c>

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in CHANNELS])


class CumulantModel:
    """Precomputed right-hand side for one (params, grid, frame) combination."""

    def __init__(self, params: PhysicalParams, grid: ClusterGrid,
                 frame: str = "atom", kappa: float | None = None,
                 gamma: float | None = None):
        """``kappa``/``gamma`` override the params rates when given.

        The overrides admit the exactly lossless limit (both zero), which
        valid experimental params rule out; conservation diagnostics use it.
        """
        if frame not in ("atom", "laser"):
            raise ValueError(f"frame must be 'atom' or 'laser', got {frame!r}")
        self.params = params
        self.grid = grid
        self.frame = frame
        M = grid.n_clusters
        self.M = M

        if frame == "atom":
            delta_c = params.delta_cavity
            d = grid.doppler.copy()
            self.drive_shift = params.delta_a  # added to segment.delta_a
        else:
            delta_c = params.delta_cavity - params.delta_a
            d = grid.doppler - params.delta_a
            self.drive_shift = 0.0

        self.kappa = params.kappa if kappa is None else float(kappa)
        self.gamma = params.gamma if gamma is None else float(gamma)
        if self.kappa < 0.0 or self.gamma < 0.0:
            raise ValueError("rate overrides must be >= 0")
        self.om = -1j * delta_c - 0.5 * self.kappa          # cavity ladder rate
        self.lam = -1j * d - 0.5 * self.gamma               # (M,) atomic ladder rate
        self.g = grid.g.copy()
        self.w = grid.multiplicity * grid.g                 # (M,) n_c g_c
        self.mult = grid.multiplicity.copy()
        self.n_atoms = grid.n_atoms
        # coherence weights; for a zero-coupling grid fall back to a plain
        # number-weighted dipole so the channel stays defined
        g_ref = params.g_eff
        if g_ref > 0.0:
            self.coh_weights = self.mult * (self.g / g_ref)
        else:
            self.coh_weights = self.mult / self.n_atoms

        # slices of the state vector
        self.sl_S = slice(3, 3 + M)
        self.sl_E = slice(3 + M, 3 + 2 * M)
        self.sl_AS = slice(3 + 2 * M, 3 + 3 * M)
        self.sl_AdS = slice(3 + 3 * M, 3 + 4 * M)
        self.sl_AE = slice(3 + 4 * M, 3 + 5 * M)
        b = 3 + 5 * M
        self.sl_PM = slice(b, b + M * M)
        self.sl_MM = slice(b + M * M, b + 2 * M * M)
        self.sl_EE = slice(b + 2 * M * M, b + 3 * M * M)
        self.sl_EM = slice(b + 3 * M * M, b + 4 * M * M)
        self.n_vars = b + 4 * M * M

        # broadcast helpers
        self._g_col = self.g[:, None]
        self._g_row = self.g[None, :]
        self._lam_row = self.lam[None, :]
        self._lam_col = self.lam[:, None]

    # ----- state construction -------------------------------------------

    def initial_state(self, theta: float = 0.0, phase: float = 0.0) -> np.ndarray:
        """Product state with uniform Bloch angle ``theta`` on every atom.

        theta = 0 is the ground state (all zeros).  The azimuth convention
        matches a resonant pulse of drive phase ``phase`` acting on the
        ground state: <s-> = -(i/2) sin(theta) e^{i phase}.
        """
        y = np.zeros(self.n_vars, dtype=complex)
        if theta == 0.0:
            return y
        s = -0.5j * np.sin(theta) * np.exp(1j * phase)
        e = np.sin(0.5 * theta) ** 2
        M = self.M
        S = np.full(M, s)
        E = np.full(M, e, dtype=complex)
        y[self.sl_S] = S
        y[self.sl_E] = E
        y[self.sl_PM] = (np.conj(S)[:, None] * S[None, :]).ravel()
        y[self.sl_MM] = (S[:, None] * S[None, :]).ravel()
        y[self.sl_EE] = (E[:, None] * E[None, :]).ravel()
        y[self.sl_EM] = (E[:, None] * S[None, :]).ravel()
        return y

    # ----- right-hand side ----------------------------------------------

    def drive(self, t: float, seg: Segment) -> complex:
        """Complex drive half-amplitude in the working frame at time t."""
        if seg.rabi == 0.0:
            return 0.0j
        r = self.drive_shift + seg.delta_a
        if r == 0.0:
            return seg.eta
        return seg.eta * np.exp(-1j * r * t)

    def rhs(self, t: float, y: np.ndarray, seg: Segment) -> np.ndarray:
        M = self.M
        om, lam = self.om, self.lam
        g, w = self.g, self.w
        kap, gam = self.kappa, self.gamma
        g_col, g_row = self._g_col, self._g_row

        A = y[0]
        AA = y[1]
        Nph = y[2]
        S = y[self.sl_S]
        E = y[self.sl_E]
        AS = y[self.sl_AS]
        AdS = y[self.sl_AdS]
        AE = y[self.sl_AE]
        PM = y[self.sl_PM].reshape(M, M)
        MM = y[self.sl_MM].reshape(M, M)
        EE = y[self.sl_EE].reshape(M, M)
        EM = y[self.sl_EM].reshape(M, M)

        eta = self.drive(t, seg)
        etab = np.conj(eta)

        cA = np.conj(A)
        cS = np.conj(S)
        cAdS = np.conj(AdS)
        cAE = np.conj(AE)
        absA2 = (A * cA).real

        dy = np.empty_like(y)

        # cavity moments
        dy[0] = om * A - 1j * (w @ S)
        dy[1] = 2.0 * om * AA - 2j * (w @ AS)
        dy[2] = -kap * Nph + 1j * (w @ (cAdS - AdS))

        # single-cluster moments
        dS = lam * S + 1j * g * (2.0 * AE - A)
        dE = 1j * g * (AdS - cAdS) - gam * E
        if eta != 0.0:
            dS = dS + 1j * eta * (2.0 * E - 1.0)
            dE = dE + 1j * (etab * S - eta * cS)
        dy[self.sl_S] = dS
        dy[self.sl_E] = dE

        # cavity-atom cross moments; the (X @ w - g*diag(X)) pattern is the
        # sum over partner atoms j != i
        dAS = ((om + lam) * AS
               - 1j * (MM @ w - g * np.diagonal(MM))
               + 1j * g * (2.0 * (AA * E + 2.0 * A * AE - 2.0 * (A * A) * E) - AA))
        dAdS = ((np.conj(om) + lam) * AdS
                + 1j * (np.conj(PM @ w) - g * np.diagonal(PM) + g * E)
                + 1j * g * (2.0 * (Nph * E + cA * AE + A * cAE - 2.0 * absA2 * E) - Nph))
        dAE = ((om - gam) * AE
               - 1j * (EM @ w - g * np.diagonal(EM))
               + 1j * g * ((Nph * S + A * AdS + cA * AS - 2.0 * absA2 * S)
                           - (AA * cS + 2.0 * A * cAdS - 2.0 * (A * A) * cS)))
        if eta != 0.0:
            dAS = dAS + 1j * eta * (2.0 * AE - A)
            dAdS = dAdS + 1j * eta * (2.0 * cAE - cA)
            dAE = dAE + 1j * (etab * AS - eta * cAdS)
        dy[self.sl_AS] = dAS
        dy[self.sl_AdS] = dAdS
        dy[self.sl_AE] = dAE

        # pair moments: one-sided generators, then T + T' to keep the
        # Hermitian/symmetric structure exact
        colS, rowS = S[:, None], S[None, :]
        colE, rowE = E[:, None], E[None, :]
        colcS = cS[:, None]
        colAS, rowAS = AS[:, None], AS[None, :]
        colAdS, rowAdS = AdS[:, None], AdS[None, :]
        colAE, rowAE = AE[:, None], AE[None, :]
        colcAdS = cAdS[:, None]
        cEMT = np.conj(EM).T

        T = (self._lam_row * PM
             + 1j * g_row * (2.0 * (colcAdS * rowE + rowAE * colcS + cEMT * A
                                    - 2.0 * A * colcS * rowE) - colcAdS))
        if eta != 0.0:
            T = T + 1j * eta * (2.0 * cEMT - colcS)
        dPM = T + np.conj(T).T

        V = (self._lam_col * MM
             + 1j * g_col * (2.0 * (colAE * rowS + rowAS * colE + EM * A
                                    - 2.0 * A * colE * rowS) - rowAS))
        if eta != 0.0:
            V = V + 1j * eta * (2.0 * EM - rowS)
        dMM = V + V.T

        Z = colAdS * rowE + cAE[None, :] * colS + EM.T * cA - 2.0 * cA * colS * rowE
        W = -gam * EE + 1j * g_col * (Z - np.conj(Z))
        if eta != 0.0:
            W = W + 1j * (etab * EM.T - eta * cEMT)
        dEE = W + W.T

        dEM = ((self._lam_row - gam) * EM
               + 1j * g_col * ((colAdS * rowS + rowAdS * colS + MM * cA
                                - 2.0 * cA * colS * rowS)
                               - (colcAdS * rowS + rowAS * colcS + PM * A
                                  - 2.0 * A * colcS * rowS))
               + 1j * g_row * (2.0 * (colAE * rowE + rowAE * colE + EE * A
                                      - 2.0 * A * colE * rowE) - colAE))
        if eta != 0.0:
            dEM = dEM + 1j * (etab * MM - eta * PM) + 1j * eta * (2.0 * EE - colE)

        dy[self.sl_PM] = dPM.ravel()
        dy[self.sl_MM] = dMM.ravel()
        dy[self.sl_EE] = dEE.ravel()
        dy[self.sl_EM] = dEM.ravel()
        return dy

    # ----- observables ---------------------------------------------------

    def observables(self, y: np.ndarray) -> Observables:
        nph = float(y[2].real)
        E = y[self.sl_E].real
        S = y[self.sl_S]
        inv_sum = float(self.mult @ E)
        coh = abs(complex(self.coh_weights @ S))
        return Observables(
            photon_rate=self.kappa * nph,
            intracavity_photons=nph,
            mean_inversion=inv_sum / self.n_atoms,
            collective_coherence=coh,
            total_excitation=nph + inv_sum,
        )

    def observer(self) -> Observer:
        """Channel observer over the (Nph, S, E) slice of the state."""
        M = self.M
        idx = np.concatenate(([2], np.arange(3, 3 + 2 * M)))
        kap = self.kappa
        mult = self.mult
        coh_w = self.coh_weights
        n_at = self.n_atoms

        def fn(t: float, y_sub: np.ndarray) -> np.ndarray:
            nph = y_sub[0].real
            S = y_sub[1:1 + M]
            E = y_sub[1 + M:1 + 2 * M].real
            inv_sum = mult @ E
            return np.array([
                kap * nph,
                nph,
                inv_sum / n_at,
                abs(coh_w @ S),
                nph + inv_sum,
            ])

        return Observer(channel_names=CHANNELS, fn=fn, indices=idx)


# ----- free-function entry points (thin wrappers over CumulantModel) -----

def initial_state(grid: ClusterGrid, theta: float = 0.0, phase: float = 0.0,
                  params: PhysicalParams | None = None) -> np.ndarray:
    if params is None:
        params = PhysicalParams(kappa=1.0, gamma=0.0, g_max=0.0, n_atoms=1, rabi=0.0)
        params = params.with_atoms(int(round(grid.n_atoms)))
    return CumulantModel(params, grid).initial_state(theta, phase)


def eom_rhs(state: np.ndarray, t: float, grid: ClusterGrid,
            params: PhysicalParams, seq: PulseSequence,
            frame: str = "atom") -> np.ndarray:
    model = CumulantModel(params, grid, frame=frame)
    if state.shape != (model.n_vars,):
        raise ValueError(
            f"state length {state.shape} does not match grid "
            f"({model.n_vars} variables for {grid.n_clusters} clusters)"
        )
    if not np.all(np.isfinite(state.view(float))):
        raise ValueError("state contains non-finite entries")
    seg = seq.segments[seq.segment_index(t)]
    return model.rhs(t, state, seg)


def observables(state: np.ndarray, grid: ClusterGrid,
                params: PhysicalParams) -> Observables:
    return CumulantModel(params, grid).observables(state)
