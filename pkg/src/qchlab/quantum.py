"""Amplitude-phase wavefunctions over mode/particle product grids and their
unitary evolution.

States live on tensor-product quadrature grids: one axis per kept field
mode (the mode amplitude) and optionally one axis per particle
coordinate.  Per-axis kinetic terms use Fourier-grid (spectral)
derivative matrices; particle-field coupling uses the antisymmetric
central-difference derivative so the assembled Hamiltonian is Hermitian
to machine precision.

The field-momentum operator per mode is eps_m = -i hbar c d/dq_m, the
sign for which [q_m, eps_m] = +i hbar c.  With this convention the
expectation of eps is the velocity of the vector potential divided by c;
the physical transverse electric field is its negative.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .lattice import LatticeSpec, ModeBasis, build_projector

__all__ = [
    "QuantumError",
    "NormDriftError",
    "TruncatedBasisError",
    "SingularConfigurationError",
    "GridAxis",
    "ModeWaveFunction",
    "QuantumHamiltonian",
    "particle_axis",
    "mode_axis",
    "dipole_coupling",
    "evolve_schrodinger",
    "EvolutionResult",
    "coulomb_potential",
    "ladder_operators",
    "commutator_check",
    "CommutatorReport",
    "phase_and_drift_table",
    "ehrenfest_residuals",
    "ExpectationReport",
    "detect_phase_vortices",
    "save_state",
    "load_state",
]

AMPLITUDE_FLOOR_FRACTION = 1e-6


class QuantumError(RuntimeError):
    pass


class NormDriftError(QuantumError):
    """Integrator lost more norm than the abort threshold allows."""


class TruncatedBasisError(QuantumError):
    """Operation requires the complete (untruncated) mode basis."""


class SingularConfigurationError(QuantumError):
    """Two charges coincide; the pairwise Coulomb sum is singular."""


# ---------------------------------------------------------------------------
# Axes and spectral operators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridAxis:
    """Uniform quadrature grid for one tensor factor."""

    label: str
    points: np.ndarray
    kind: str  # "particle" | "mode"

    @property
    def n(self) -> int:
        return self.points.size

    @property
    def dq(self) -> float:
        return float(self.points[1] - self.points[0])


def spectral_wavenumbers(axis: GridAxis) -> np.ndarray:
    return 2.0 * np.pi * np.fft.fftfreq(axis.n, d=axis.dq)


def spectral_second_derivative(axis: GridAxis) -> np.ndarray:
    """Dense Fourier-grid d^2/dq^2 (real symmetric)."""
    k = spectral_wavenumbers(axis)
    mat = np.fft.ifft((-k * k)[:, None] * np.fft.fft(np.eye(axis.n), axis=0), axis=0)
    return 0.5 * (mat.real + mat.real.T)


def spectral_first_derivative(axis: GridAxis) -> np.ndarray:
    """Dense Fourier-grid d/dq with the Nyquist bin zeroed (antisymmetric)."""
    k = spectral_wavenumbers(axis).copy()
    if axis.n % 2 == 0:
        k[axis.n // 2] = 0.0
    mat = np.fft.ifft((1j * k)[:, None] * np.fft.fft(np.eye(axis.n), axis=0), axis=0)
    real = np.real(mat)  # odd symbol on a real basis: kernel is real antisymmetric
    return 0.5 * (real - real.T)


def central_first_derivative(axis: GridAxis) -> sp.csr_matrix:
    """Sparse periodic central difference (antisymmetric); used in couplings."""
    n, dq = axis.n, axis.dq
    rows = np.arange(n)
    data = np.full(n, 1.0 / (2.0 * dq))
    up = sp.csr_matrix((data, (rows, (rows + 1) % n)), shape=(n, n))
    return up - up.T


@dataclass
class AxisOperators:
    """Cached dense operators of one factor."""

    h_local: np.ndarray           # kinetic + local potential on this axis
    first_derivative: np.ndarray  # spectral d/dq
    eigvals: np.ndarray
    eigvecs: np.ndarray


def particle_axis(
    length: float,
    n: int,
    mass: float,
    potential: Callable[[np.ndarray], np.ndarray],
    hbar: float = 1.0,
    center: float = 0.0,
    label: str = "particle",
) -> tuple[GridAxis, AxisOperators]:
    """Periodic particle coordinate axis with spectral kinetic energy."""
    pts = center - length / 2.0 + (length / n) * np.arange(n)
    axis = GridAxis(label, pts, "particle")
    t = -(hbar ** 2) / (2.0 * mass) * spectral_second_derivative(axis)
    h = t + np.diag(potential(pts))
    vals, vecs = np.linalg.eigh(0.5 * (h + h.T))
    return axis, AxisOperators(h, spectral_first_derivative(axis), vals, vecs)


def mode_axis(
    omega: float,
    n: int,
    hbar: float = 1.0,
    c: float = 1.0,
    half_width: Optional[float] = None,
    label: str = "mode",
) -> tuple[GridAxis, AxisOperators]:
    """Mode-amplitude axis: H = (eps^2 + (omega/c)^2 q^2)/2.

    The oscillator mass is 1/c^2, so the ground-state variance of q is
    hbar c^2 / (2 omega).  The default domain covers +-9 ground-state
    widths, enough for moderately displaced states.
    """
    sigma = np.sqrt(hbar * c * c / (2.0 * omega))
    if half_width is None:
        half_width = 9.0 * sigma
    pts = np.linspace(-half_width, half_width, n, endpoint=False)
    axis = GridAxis(label, pts, "mode")
    t = -(hbar ** 2 * c ** 2) / 2.0 * spectral_second_derivative(axis)
    h = t + np.diag(0.5 * (omega / c) ** 2 * pts ** 2)
    vals, vecs = np.linalg.eigh(0.5 * (h + h.T))
    return axis, AxisOperators(h, spectral_first_derivative(axis), vals, vecs)


# ---------------------------------------------------------------------------
# Wavefunctions
# ---------------------------------------------------------------------------

@dataclass
class ModeWaveFunction:
    """Complex state on the product grid with amplitude-phase access.

    The phase accessor unwraps along each grid axis and records the
    2-pi-branch offsets; vortices (nonzero plaquette winding) are
    detected, never smoothed over.
    """

    axes: list[GridAxis]
    psi: np.ndarray

    def __post_init__(self):
        shape = tuple(a.n for a in self.axes)
        if self.psi.shape != shape:
            raise QuantumError(f"state shape {self.psi.shape} does not match axes {shape}")
        self.psi = np.asarray(self.psi, dtype=complex)

    @property
    def weight(self) -> float:
        return float(np.prod([a.dq for a in self.axes]))

    def norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.psi) ** 2) * self.weight))

    def normalized(self) -> "ModeWaveFunction":
        return ModeWaveFunction(self.axes, self.psi / self.norm())

    @property
    def amplitude(self) -> np.ndarray:
        return np.abs(self.psi)

    def phase_unwrapped(self) -> np.ndarray:
        theta = np.angle(self.psi)
        for ax in range(theta.ndim):
            theta = np.unwrap(theta, axis=ax)
        return theta

    def amplitude_floor(self) -> float:
        return AMPLITUDE_FLOOR_FRACTION * float(np.max(self.amplitude))

    def expectation_diagonal(self, values: np.ndarray) -> float:
        return float(np.real(np.sum(np.conj(self.psi) * values * self.psi)) * self.weight)

    def expectation_axis_matrix(self, axis_index: int, matrix: np.ndarray) -> complex:
        moved = np.moveaxis(self.psi, axis_index, 0)
        out = np.tensordot(matrix, moved, axes=(1, 0))
        return complex(np.sum(np.conj(moved) * out) * self.weight)

    def apply_axis_matrix(self, axis_index: int, matrix: np.ndarray) -> np.ndarray:
        moved = np.moveaxis(self.psi, axis_index, 0)
        out = np.tensordot(matrix, moved, axes=(1, 0))
        return np.moveaxis(out, 0, axis_index)

    def marginal(self, axis_index: int) -> np.ndarray:
        """Probability density marginalized onto one axis."""
        prob = np.abs(self.psi) ** 2
        other = tuple(i for i in range(prob.ndim) if i != axis_index)
        w_other = self.weight / self.axes[axis_index].dq
        return prob.sum(axis=other) * w_other

    def copy(self) -> "ModeWaveFunction":
        return ModeWaveFunction(self.axes, self.psi.copy())


def detect_phase_vortices(phase: np.ndarray) -> list[tuple[int, int]]:
    """Plaquette winding scan of a 2D phase sheet.

    Returns plaquette corner indices where the summed, branch-wrapped
    phase differences come back off by a multiple of 2 pi.
    """
    if phase.ndim != 2:
        raise QuantumError("vortex detection expects a 2D phase sheet")

    def wrap(d):
        return (d + np.pi) % (2.0 * np.pi) - np.pi

    winding = (
        wrap(phase[1:, :-1] - phase[:-1, :-1])
        + wrap(phase[1:, 1:] - phase[1:, :-1])
        + wrap(phase[:-1, 1:] - phase[1:, 1:])
        + wrap(phase[:-1, :-1] - phase[:-1, 1:])
    )
    hits = np.argwhere(np.abs(winding) > np.pi)
    return [tuple(map(int, h)) for h in hits]


# ---------------------------------------------------------------------------
# Hamiltonians
# ---------------------------------------------------------------------------

@dataclass
class QuantumHamiltonian:
    """Hamiltonian on the product grid: per-factor parts plus coupling.

    ``factor_ops[i].h_local`` acts on axis i alone; ``coupling`` (sparse,
    over the flattened product space) holds everything that mixes axes.
    The field part is diagonal in the mode basis by construction.
    """

    axes: list[GridAxis]
    factor_ops: list[AxisOperators]
    coupling: Optional[sp.spmatrix]
    hbar: float = 1.0
    c: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return int(np.prod([a.n for a in self.axes]))

    def full_matrix(self) -> sp.csr_matrix:
        h = sp.csr_matrix((self.dim, self.dim), dtype=complex)
        for i, ops in enumerate(self.factor_ops):
            h = h + self._lift(i, sp.csr_matrix(ops.h_local))
        if self.coupling is not None:
            h = h + self.coupling
        return h.tocsr()

    def _lift(self, axis_index: int, mat: sp.spmatrix) -> sp.csr_matrix:
        parts = []
        for i, a in enumerate(self.axes):
            parts.append(mat if i == axis_index else sp.identity(a.n, format="csr"))
        out = parts[0]
        for p in parts[1:]:
            out = sp.kron(out, p, format="csr")
        return out

    def apply(self, psi: np.ndarray) -> np.ndarray:
        out = np.zeros_like(psi, dtype=complex)
        state = ModeWaveFunction(self.axes, psi)
        for i, ops in enumerate(self.factor_ops):
            out += state.apply_axis_matrix(i, ops.h_local)
        if self.coupling is not None:
            out += (self.coupling @ psi.reshape(-1)).reshape(psi.shape)
        return out

    def energy(self, state: ModeWaveFunction) -> float:
        return float(np.real(np.sum(np.conj(state.psi) * self.apply(state.psi)) * state.weight))

    def hermiticity_defect(self, rng: np.random.Generator, trials: int = 4) -> float:
        """max |<phi|H psi> - <H phi|psi>| over random normalized states."""
        worst = 0.0
        shape = tuple(a.n for a in self.axes)
        w = float(np.prod([a.dq for a in self.axes]))
        for _ in range(trials):
            phi = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
            psi = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
            phi /= np.sqrt(np.sum(np.abs(phi) ** 2) * w)
            psi /= np.sqrt(np.sum(np.abs(psi) ** 2) * w)
            lhs = np.sum(np.conj(phi) * self.apply(psi)) * w
            rhs = np.sum(np.conj(self.apply(phi)) * psi) * w
            worst = max(worst, abs(lhs - rhs))
        return worst

    def ground_state(self) -> ModeWaveFunction:
        """Product of per-factor ground states (exact when coupling is absent)."""
        psi = None
        for ops, a in zip(self.factor_ops, self.axes):
            g = ops.eigvecs[:, 0] / np.sqrt(a.dq)
            psi = g if psi is None else np.multiply.outer(psi, g)
        return ModeWaveFunction(self.axes, psi.astype(complex)).normalized()


def dipole_coupling(
    axes: list[GridAxis],
    particle_index: int,
    mode_indices: Sequence[int],
    mode_values: Sequence[Callable[[np.ndarray], np.ndarray]],
    charge: float,
    mass: float,
    hbar: float = 1.0,
    c: float = 1.0,
) -> sp.csr_matrix:
    """Minimal-coupling terms for one particle in a scalar-analog field.

    Builds (i hbar e / 2 M c)(a D + D a) + e^2 a^2 / (2 M c^2) with
    a(x) = sum_m q_m * mode_values[m](x) and D the central difference on
    the particle axis (keeps the assembled operator exactly Hermitian).
    """
    n_axes = len(axes)
    x = axes[particle_index].points

    def lift(mats: dict[int, sp.spmatrix]) -> sp.csr_matrix:
        out = None
        for i, a in enumerate(axes):
            m = mats.get(i, sp.identity(a.n, format="csr", dtype=complex))
            out = m if out is None else sp.kron(out, m, format="csr")
        return out

    d_part = central_first_derivative(axes[particle_index]).astype(complex)
    total = None
    for mi, fval in zip(mode_indices, mode_values):
        prof = sp.diags(fval(x)).astype(complex)
        sandwich = (prof @ d_part + d_part @ prof) * (1j * hbar * charge / (2.0 * mass * c))
        q_m = sp.diags(axes[mi].points).astype(complex)
        term = lift({particle_index: sandwich, mi: q_m})
        total = term if total is None else total + term
    # a^2 term: diagonal in every axis.
    for ai, fa in zip(mode_indices, mode_values):
        for bi, fb in zip(mode_indices, mode_values):
            prof = sp.diags(fa(x) * fb(x) * (charge ** 2 / (2.0 * mass * c * c))).astype(complex)
            qa = sp.diags(axes[ai].points).astype(complex)
            qb = sp.diags(axes[bi].points).astype(complex)
            mats = {particle_index: prof}
            if ai == bi:
                mats[ai] = qa @ qb
            else:
                mats[ai] = qa
                mats[bi] = qb
            term = lift(mats)
            total = term if total is None else total + term
    assert n_axes >= 2
    return total.tocsr()


def coulomb_potential(
    positions: np.ndarray,
    charges: np.ndarray,
    cell: Optional[Sequence[float]] = None,
) -> np.ndarray:
    """Pairwise instantaneous Coulomb potential at each charge.

    A0_alpha = (1/4 pi) sum_{beta != alpha} e_beta / |r_alpha - r_beta|,
    with the minimum-image convention when a periodic cell is given.  The
    self term is excluded (its divergent constant is absorbed into the
    wavefunction phase).
    """
    pos = np.atleast_2d(np.asarray(positions, dtype=float))
    q = np.asarray(charges, dtype=float).reshape(-1)
    n = pos.shape[0]
    if q.size != n:
        raise QuantumError("positions and charges disagree in length")
    out = np.zeros(n)
    for a in range(n):
        for b in range(n):
            if a == b:
                continue
            delta = pos[a] - pos[b]
            if cell is not None:
                for ax, length in enumerate(cell):
                    delta[ax] -= length * np.round(delta[ax] / length)
            r = np.linalg.norm(delta)
            if r < 1e-12:
                raise SingularConfigurationError(
                    f"charges {a} and {b} coincide (separation {r:.3e})"
                )
            out[a] += q[b] / (4.0 * np.pi * r)
    return out


# ---------------------------------------------------------------------------
# Time evolution
# ---------------------------------------------------------------------------

@dataclass
class EvolutionResult:
    psi: ModeWaveFunction
    times: np.ndarray
    observables: dict[str, np.ndarray]
    norms: np.ndarray
    states: Optional[list[ModeWaveFunction]] = None


def evolve_schrodinger(
    psi: ModeWaveFunction,
    hamiltonian: QuantumHamiltonian,
    dt: float,
    n_steps: int,
    sample_every: int = 1,
    observables: Optional[dict[str, Callable[[ModeWaveFunction], float]]] = None,
    keep_states: bool = False,
    norm_abort: float = 1e-6,
) -> EvolutionResult:
    """Unitary stepping of a time-independent Hamiltonian.

    The per-factor parts propagate exactly through their cached
    eigenbases; the coupling, when present, advances by a Crank-Nicolson
    (Cayley) substep between factor half-steps (Strang order).  Every map
    is unitary, so the norm is preserved to solver roundoff at any dt;
    state and energy errors are O(dt^2) and vanish for uncoupled systems.
    Norm drift beyond ``norm_abort`` aborts: the step is misconfigured.
    """
    hbar = hamiltonian.hbar
    state = psi.copy()
    observables = observables or {}
    coupled = hamiltonian.coupling is not None and hamiltonian.coupling.nnz > 0
    tau = dt / 2.0 if coupled else dt
    props = []
    for ops in hamiltonian.factor_ops:
        phase = np.exp(-1j * ops.eigvals * tau / hbar)
        props.append((ops.eigvecs * phase) @ ops.eigvecs.conj().T)
    if coupled:
        csc = hamiltonian.coupling.tocsc()
        ident = sp.identity(csc.shape[0], format="csc")
        solver = spla.splu((ident + 0.5j * dt / hbar * csc).tocsc())
        rhs_mat = (ident - 0.5j * dt / hbar * csc).tocsr()

    def half_factors():
        for i, u in enumerate(props):
            state.psi = state.apply_axis_matrix(i, u)

    n_samples = n_steps // sample_every + 1
    times = dt * sample_every * np.arange(n_samples)
    series = {k: np.empty(n_samples) for k in observables}
    norms = np.empty(n_samples)
    states = [] if keep_states else None

    def record(slot: int):
        norms[slot] = state.norm()
        for k, fn in observables.items():
            series[k][slot] = fn(state)
        if keep_states:
            states.append(state.copy())

    record(0)
    slot = 1
    for step in range(n_steps):
        half_factors()
        if coupled:
            flat = rhs_mat @ state.psi.reshape(-1)
            state.psi = solver.solve(flat).reshape(state.psi.shape)
            half_factors()
        if (step + 1) % sample_every == 0:
            record(slot)
            if abs(norms[slot] - 1.0) > norm_abort:
                raise NormDriftError(
                    f"norm drifted to {norms[slot]:.12f} at step {step + 1}; reduce dt"
                )
            slot += 1
    return EvolutionResult(state, times, series, norms, states)


# ---------------------------------------------------------------------------
# Ladder operators and the commutation identity
# ---------------------------------------------------------------------------

def ladder_operators(omega: float, hbar: float, c: float, n_levels: int):
    """Number-basis q and eps matrices for one mode.

    q = alpha (A + A*), eps = i beta (A* - A) with 2 alpha beta = hbar c,
    so [q, eps] = i hbar c exactly for any level count when probed in the
    ground state.
    """
    alpha = np.sqrt(hbar * c * c / (2.0 * omega))
    beta = np.sqrt(hbar * omega / 2.0)
    lower = np.diag(np.sqrt(np.arange(1, n_levels)), 1)
    raise_ = lower.T
    q = alpha * (lower + raise_)
    eps = 1j * beta * (raise_ - lower)
    return q, eps


@dataclass(frozen=True)
class CommutatorReport:
    max_residual: float
    assembled: np.ndarray
    reference: np.ndarray


def commutator_check(
    basis: ModeBasis,
    hbar: float = 1.0,
    c: float = 1.0,
    n_levels: int = 6,
    reference_omega: Optional[float] = None,
) -> CommutatorReport:
    """Reconstruct [a_i(x), eps_j(y)] from mode operators and compare with
    i hbar c times the lattice transverse delta.

    The assembly is sum_m e~_m(x) e~_m(y) <0|[q_m, eps_m]|0> where each
    single-mode commutator expectation comes from explicit ladder
    matrices (cross-mode operators act on distinct tensor factors and
    commute identically).  The reference is the dense projector matrix
    divided by the site weight; for the 1D scalar analog it degenerates
    to delta_xy / dx.  Frozen (zero-frequency) modes enter the kinematic
    sum with an arbitrary reference frequency; the commutator value does
    not depend on it.  Requires the complete basis: with any mode dropped
    the identity cannot hold.
    """
    spec = basis.spec
    total_dynamical = _count_dynamical_modes(spec, basis.scalar)
    if basis.truncation < total_dynamical:
        raise TruncatedBasisError(
            f"basis keeps {basis.truncation} of {total_dynamical} dynamical modes; "
            "the commutation identity needs all of them"
        )
    if reference_omega is None:
        reference_omega = c / spec.spacing
    vecs = [basis.vectors[:, i] for i in range(basis.truncation)]
    omegas = list(basis.omegas)
    for i in range(basis.frozen_vectors.shape[1]):
        vecs.append(basis.frozen_vectors[:, i])
        omegas.append(reference_omega)
    h = spec.cell_volume
    dof = basis.vectors.shape[0]
    assembled = np.zeros((dof, dof), dtype=complex)
    for vec, om in zip(vecs, omegas):
        q_m, eps_m = ladder_operators(om, hbar, c, n_levels)
        comm = q_m @ eps_m - eps_m @ q_m
        k_m = comm[0, 0]  # ground-state expectation, exactly i hbar c
        assembled += np.outer(vec, vec) * k_m / h
    if basis.scalar:
        reference = 1j * hbar * c * np.eye(spec.n_sites) / h
    else:
        reference = 1j * hbar * c * build_projector(spec).matrix / h
    residual = float(np.max(np.abs(assembled - reference)))
    return CommutatorReport(residual, assembled, reference)


def _count_dynamical_modes(spec: LatticeSpec, scalar: bool) -> int:
    from .lattice import decompose_modes

    return decompose_modes(spec, None, scalar=scalar).truncation


# ---------------------------------------------------------------------------
# Drifts from the wavefunction (SVM closure)
# ---------------------------------------------------------------------------

def phase_and_drift_table(
    times: np.ndarray,
    grid: np.ndarray,
    psi_frames: np.ndarray,
    hbar: float,
    mass: float,
    diffusion_coeff: Optional[float] = None,
):
    """Drift pair sampled from wavefunction snapshots on a 1D grid.

    Per frame, the current velocity is (hbar/M) d theta/dx and the
    osmotic velocity (hbar/2M) d log rho / dx, masked below the amplitude
    floor; forward drift = current + osmotic, backward = current -
    osmotic, so the consistency residual vanishes by construction.
    Returns a :class:`qchlab.sde.DriftField` whose callables interpolate
    in x at the nearest stored frame.

    Phase sheets are unwrapped per frame; an unwrap failure across a
    vortex raises with the offending location (codimension-2 nodes cannot
    occur on a 1D grid, but amplitude zeros still poison the local
    drift and are masked).
    """
    from .sde import DriftField

    times = np.asarray(times, dtype=float)
    frames = np.asarray(psi_frames, dtype=complex)
    if frames.shape != (times.size, grid.size):
        raise QuantumError("psi_frames must be (n_times, n_grid)")
    v_tab = np.empty((times.size, grid.size))
    u_tab = np.empty((times.size, grid.size))
    gl_tab = np.empty((times.size, grid.size))
    for i in range(times.size):
        amp = np.abs(frames[i])
        floor = AMPLITUDE_FLOOR_FRACTION * amp.max()
        theta = np.unwrap(np.angle(frames[i]))
        rho = np.maximum(amp, floor) ** 2
        v = (hbar / mass) * np.gradient(theta, grid)
        gl = np.gradient(np.log(rho), grid)
        u = 0.5 * (hbar / mass) * gl
        mask = amp < floor
        v[mask] = 0.0
        u[mask] = 0.0
        gl[mask] = 0.0
        v_tab[i], u_tab[i], gl_tab[i] = v, u, gl

    def frame_of(t: float) -> int:
        if times.size == 1:  # stationary state: time-independent drift
            return 0
        i = int(np.argmin(np.abs(times - t)))
        if abs(times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise QuantumError(f"no wavefunction frame at t={t}")
        return i

    def fwd(x, t):
        i = frame_of(t)
        return np.interp(x.reshape(-1), grid, v_tab[i] + u_tab[i]).reshape(x.shape)

    def bwd(x, t):
        i = frame_of(t)
        return np.interp(x.reshape(-1), grid, v_tab[i] - u_tab[i]).reshape(x.shape)

    def grad_log(x, t):
        i = frame_of(t)
        return np.interp(x.reshape(-1), grid, gl_tab[i]).reshape(x.shape)

    return DriftField(fwd, bwd, grad_log, diffusion_coeff if diffusion_coeff is not None else hbar / mass)


# ---------------------------------------------------------------------------
# Ehrenfest diagnostics
# ---------------------------------------------------------------------------

@dataclass
class ExpectationReport:
    """Observable time series plus defect norms of the expectation equations."""

    times: np.ndarray
    observables: dict[str, np.ndarray]
    residuals: dict[str, float]

    def to_csv(self, path) -> None:
        keys = sorted(self.observables)
        with open(path, "w") as fh:
            fh.write("time," + ",".join(keys) + "\n")
            for i, t in enumerate(self.times):
                row = ",".join(f"{self.observables[k][i]:.17g}" for k in keys)
                fh.write(f"{t:.17g},{row}\n")


def _centered_dt(series: np.ndarray, dt: float, stencil: int = 2) -> np.ndarray:
    if stencil == 2:
        return (series[2:] - series[:-2]) / (2.0 * dt)
    if stencil == 4:
        return (-series[4:] + 8 * series[3:-1] - 8 * series[1:-3] + series[:-4]) \
            / (12.0 * dt)
    raise QuantumError(f"unsupported stencil order {stencil}")


def ehrenfest_residuals(
    times: np.ndarray,
    states: Sequence[ModeWaveFunction],
    hamiltonian: QuantumHamiltonian,
    mode_omegas: Sequence[float],
    mode_axis_indices: Sequence[int],
    particle: Optional[dict] = None,
    stencil: int = 2,
) -> ExpectationReport:
    """Expectation-equation defects measured from an evolution history.

    Mode-level checks (exact identities of the grid dynamics, measured
    with centered time differences):

      d<q_m>/dt - c <eps_m>                      (curl-of-eps pair)
      d<eps_m>/dt + (omega_m^2/c) <q_m> - J_m    (current-source pair)

    With charges present J_m is the symmetrized velocity-at-the-particle
    expectation built from the same operators that enter the coupling.
    The particle block checks d<x>/dt - <v>.  Needs at least 3 samples.
    ``stencil`` selects the time-derivative measurement order (2 or 4);
    the default matches the halving-convergence studies, the fourth-order
    form is for residuals near the roundoff floor.
    """
    if len(states) < stencil + 1:
        raise QuantumError("need at least 3 time samples for centered differences")
    times = np.asarray(times, dtype=float)
    dt = times[1] - times[0]
    trim = stencil // 2
    hbar, c = hamiltonian.hbar, hamiltonian.c
    obs: dict[str, np.ndarray] = {}
    n_t = len(states)

    for m, (om, ai) in enumerate(zip(mode_omegas, mode_axis_indices)):
        axis = hamiltonian.axes[ai]
        d1 = hamiltonian.factor_ops[ai].first_derivative
        eps_mat = -1j * hbar * c * d1
        q_series = np.empty(n_t)
        e_series = np.empty(n_t)
        for i, st in enumerate(states):
            q_series[i] = st.expectation_diagonal(
                _broadcast_axis(st, ai, axis.points)
            )
            e_series[i] = np.real(st.expectation_axis_matrix(ai, eps_mat))
        obs[f"q_{m}"] = q_series
        obs[f"eps_{m}"] = e_series

    j_series: dict[int, np.ndarray] = {}
    if particle is not None:
        pi = particle["axis_index"]
        x = hamiltonian.axes[pi].points
        charge, mass = particle["charge"], particle["mass"]
        d_c = central_first_derivative(hamiltonian.axes[pi]).toarray().astype(complex)
        x_series = np.empty(n_t)
        v_series = np.empty(n_t)
        mode_vals = particle["mode_values"]
        for m, (om, ai) in enumerate(zip(mode_omegas, mode_axis_indices)):
            j_series[m] = np.empty(n_t)
        for i, st in enumerate(states):
            x_series[i] = st.expectation_diagonal(_broadcast_axis(st, pi, x))
            vel_psi = _velocity_apply(st, pi, d_c, mode_vals, mode_axis_indices,
                                       charge, mass, hbar, c)
            v_series[i] = float(np.real(np.sum(np.conj(st.psi) * vel_psi) * st.weight))
            for m, ai in enumerate(mode_axis_indices):
                prof = mode_vals[m](x)
                prof_psi = _broadcast_axis(st, pi, prof) * st.psi
                sym = 0.5 * (
                    np.sum(np.conj(st.psi) * _broadcast_axis(st, pi, prof) * vel_psi)
                    + np.sum(np.conj(prof_psi) * vel_psi)
                )
                j_series[m][i] = charge * float(np.real(sym * st.weight))
        obs["x"] = x_series
        obs["v"] = v_series
        for m in j_series:
            obs[f"J_{m}"] = j_series[m]

    residuals: dict[str, float] = {}
    mid = slice(trim, -trim)
    for m, om in enumerate(mode_omegas):
        dq = _centered_dt(obs[f"q_{m}"], dt, stencil)
        de = _centered_dt(obs[f"eps_{m}"], dt, stencil)
        faraday = dq - c * obs[f"eps_{m}"][mid]
        source = j_series[m][mid] if m in j_series else 0.0
        ampere = de + (om ** 2 / c) * obs[f"q_{m}"][mid] - source
        residuals[f"faraday_{m}"] = float(np.max(np.abs(faraday)))
        residuals[f"ampere_{m}"] = float(np.max(np.abs(ampere)))
    if particle is not None:
        dx = _centered_dt(obs["x"], dt, stencil)
        residuals["particle_velocity"] = float(np.max(np.abs(dx - obs["v"][mid])))
    return ExpectationReport(times, obs, residuals)


def _broadcast_axis(state: ModeWaveFunction, axis_index: int, values: np.ndarray) -> np.ndarray:
    shape = [1] * state.psi.ndim
    shape[axis_index] = values.size
    return values.reshape(shape)


def _velocity_apply(state, particle_index, d_central, mode_values, mode_axis_indices,
                    charge, mass, hbar, c):
    """(p - e a(x)/c)/M applied to the state, with the coupling's derivative."""
    out = -1j * hbar * np.moveaxis(
        np.tensordot(d_central, np.moveaxis(state.psi, particle_index, 0), axes=(1, 0)),
        0, particle_index,
    )
    x = state.axes[particle_index].points
    for m, ai in enumerate(mode_axis_indices):
        prof = _broadcast_axis(state, particle_index, mode_values[m](x))
        qm = _broadcast_axis(state, ai, state.axes[ai].points)
        out = out - (charge / c) * prof * qm * state.psi
    return out / mass


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------

def save_state(state: ModeWaveFunction, path) -> None:
    """Binary snapshot: axis metadata plus interleaved amplitude/phase."""
    with open(path, "wb") as fh:
        fh.write(b"QPSI")
        fh.write(struct.pack("<i", len(state.axes)))
        for a in state.axes:
            label = a.label.encode()[:16].ljust(16, b"\0")
            fh.write(label)
            fh.write(struct.pack("<i", a.n))
            fh.write(struct.pack("<d", float(a.points[0])))
            fh.write(struct.pack("<d", a.dq))
            fh.write((a.kind.encode()[:8]).ljust(8, b"\0"))
        inter = np.empty(state.psi.size * 2)
        inter[0::2] = np.abs(state.psi).reshape(-1)
        inter[1::2] = np.angle(state.psi).reshape(-1)
        inter.astype("<f8").tofile(fh)


def load_state(path) -> ModeWaveFunction:
    with open(path, "rb") as fh:
        if fh.read(4) != b"QPSI":
            raise QuantumError("not a state snapshot")
        (n_axes,) = struct.unpack("<i", fh.read(4))
        axes = []
        for _ in range(n_axes):
            label = fh.read(16).rstrip(b"\0").decode()
            (n,) = struct.unpack("<i", fh.read(4))
            (x0,) = struct.unpack("<d", fh.read(8))
            (dq,) = struct.unpack("<d", fh.read(8))
            kind = fh.read(8).rstrip(b"\0").decode()
            axes.append(GridAxis(label, x0 + dq * np.arange(n), kind))
        size = int(np.prod([a.n for a in axes]))
        inter = np.fromfile(fh, dtype="<f8", count=2 * size)
    amp, ph = inter[0::2], inter[1::2]
    psi = (amp * np.exp(1j * ph)).reshape(tuple(a.n for a in axes))
    return ModeWaveFunction(axes, psi)
