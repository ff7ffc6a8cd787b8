"""Quantum-classical hybrid dynamics: classical charges driven by, and
backreacting on, a truncated quantized field.

Two regimes resolve the dependence of the classical trajectory on the
field configuration:

* mean-field: the trajectory is a single point f(t); the field sector
  feels the charge through a configuration-diagonal coupling
  (pbar - (e/c) a(f; {q}))^2 / 2M, and the classical pair (f, pbar)
  follows Hamilton's equations of the field-averaged Hamiltonian.  That
  canonical closure conserves <H> exactly in continuous time; the
  expectation form of the Lorentz-force law differs from it only by
  field-fluctuation covariance terms, which the diagnostics expose.

* configuration-resolved: the trajectory is tabulated over one
  designated mode amplitude, each slice evolving in its frozen field
  configuration.  This exposes the configuration dependence that
  generates the displacement contribution to the transverse current and
  the path spread entering the geometric phase.

The stored wavefunctional evolves with H + H_delta, where H_delta =
-sum_alpha v_alpha . pbar_alpha per configuration is the generator
difference between the partial- and total-time pictures; it vanishes
with the velocities and is a pure phase in the mean-field regime.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .quantum import (
    AxisOperators,
    GridAxis,
    ModeWaveFunction,
    QuantumError,
    mode_axis,
)

__all__ = [
    "HybridError",
    "StepRejectedError",
    "ModeCoupling",
    "HybridSystem",
    "HybridState",
    "HybridEnergyLedger",
    "CurrentDecomposition",
    "ExtendedEhrenfestReport",
    "step_hybrid",
    "energy_ledger",
    "extended_ehrenfest",
    "quasi_trajectory_table",
    "QuasiTrajectoryTable",
    "history_to_csv",
]

MAX_STEP_HALVINGS = 8


class HybridError(RuntimeError):
    pass


class StepRejectedError(HybridError):
    """A step produced non-finite classical data even after dt halving."""


@dataclass(frozen=True)
class ModeCoupling:
    """How one kept mode is seen by the particle.

    ``value``/``gradient`` give the scalar mode profile and its spatial
    gradient at a particle position (exact trigonometric evaluation keeps
    the force smooth across lattice cells); ``polarization`` is the
    direction along which this mode's amplitude contributes to the vector
    potential in particle space.  ``value_batch``/``gradient_batch``
    (optional vectorized forms over (n, d_p) position arrays) keep the
    per-slice integrators out of Python loops.
    """

    omega: float
    value: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    polarization: np.ndarray
    value_batch: Optional[Callable[[np.ndarray], np.ndarray]] = None
    gradient_batch: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def values(self, positions: np.ndarray) -> np.ndarray:
        if self.value_batch is not None:
            return self.value_batch(positions)
        return np.array([self.value(f) for f in positions])

    def gradients(self, positions: np.ndarray) -> np.ndarray:
        if self.gradient_batch is not None:
            return self.gradient_batch(positions)
        return np.array([self.gradient(f) for f in positions])


@dataclass
class HybridSystem:
    """One classical charge coupled to a truncated mode set."""

    mass: float
    charge: float
    potential: Callable[[np.ndarray], float]
    potential_gradient: Callable[[np.ndarray], np.ndarray]
    couplings: list[ModeCoupling]
    axes: list[GridAxis]
    axis_ops: list[AxisOperators]
    hbar: float = 1.0
    c: float = 1.0
    potential_batch: Optional[Callable[[np.ndarray], np.ndarray]] = None
    potential_gradient_batch: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if len(self.couplings) != len(self.axes):
            raise HybridError("one grid axis per kept mode is required")
        self._prop_cache: dict[float, list[np.ndarray]] = {}
        self._eps_mats = [
            -1j * self.hbar * self.c * ops.first_derivative for ops in self.axis_ops
        ]

    def potential_values(self, positions: np.ndarray) -> np.ndarray:
        if self.potential_batch is not None:
            return self.potential_batch(positions)
        return np.array([self.potential(f) for f in positions])

    def potential_gradients(self, positions: np.ndarray) -> np.ndarray:
        if self.potential_gradient_batch is not None:
            return self.potential_gradient_batch(positions)
        return np.stack([self.potential_gradient(f) for f in positions])

    @property
    def n_modes(self) -> int:
        return len(self.couplings)

    @property
    def omegas(self) -> np.ndarray:
        return np.array([cp.omega for cp in self.couplings])

    def mode_values_at(self, f: np.ndarray) -> np.ndarray:
        return np.array([cp.value(f) for cp in self.couplings])

    def mode_gradients_at(self, f: np.ndarray) -> np.ndarray:
        return np.array([cp.gradient(f) for cp in self.couplings])

    def polarizations(self) -> np.ndarray:
        return np.array([cp.polarization for cp in self.couplings])

    # ---- field-state moments -------------------------------------------

    def field_moments(self, psi: ModeWaveFunction) -> dict:
        k = self.n_modes
        q_mean = np.empty(k)
        eps_mean = np.empty(k)
        for m in range(k):
            vals = _axis_broadcast(psi, m, self.axes[m].points)
            q_mean[m] = psi.expectation_diagonal(vals)
            eps_mean[m] = float(np.real(psi.expectation_axis_matrix(m, self._eps_mats[m])))
        cov = np.empty((k, k))
        for a in range(k):
            va = _axis_broadcast(psi, a, self.axes[a].points)
            for b in range(a, k):
                vb = _axis_broadcast(psi, b, self.axes[b].points)
                cov[a, b] = cov[b, a] = psi.expectation_diagonal(va * vb) - q_mean[a] * q_mean[b]
        return {"q": q_mean, "eps": eps_mean, "cov": cov}

    def field_energy(self, psi: ModeWaveFunction) -> float:
        total = 0.0
        for m, ops in enumerate(self.axis_ops):
            total += float(np.real(psi.expectation_axis_matrix(m, ops.h_local)))
        return total

    # ---- classical sector ----------------------------------------------

    def a_mean(self, f: np.ndarray, q_mean: np.ndarray) -> np.ndarray:
        vals = self.mode_values_at(f)
        return (q_mean * vals) @ self.polarizations()

    def velocity(self, f: np.ndarray, pbar: np.ndarray, q_mean: np.ndarray) -> np.ndarray:
        return (pbar - (self.charge / self.c) * self.a_mean(f, q_mean)) / self.mass

    def classical_energy(self, f: np.ndarray, pbar: np.ndarray, moments: dict) -> float:
        """<(pbar - (e/c) a(f))^2>/2M + V, including the field-variance term."""
        e, c, m = self.charge, self.c, self.mass
        kin_mean = pbar - (e / c) * self.a_mean(f, moments["q"])
        vals = self.mode_values_at(f)
        pols = self.polarizations()
        gram = pols @ pols.T
        var = float(vals @ (moments["cov"] * gram) @ vals)
        return float(kin_mean @ kin_mean) / (2 * m) + (e / c) ** 2 * var / (2 * m) \
            + self.potential(f)

    def classical_force(self, f: np.ndarray, pbar: np.ndarray, moments: dict) -> np.ndarray:
        """-d<H>/df at frozen field moments (canonical mean-field force)."""
        e, c, m = self.charge, self.c, self.mass
        q_mean, cov = moments["q"], moments["cov"]
        vals = self.mode_values_at(f)
        grads = self.mode_gradients_at(f)      # (K, d_p)
        pols = self.polarizations()            # (K, d_p)
        v = self.velocity(f, pbar, q_mean)
        # d a_mean / d f_j = sum_m <q_m> pol_m grad_m_j
        da = np.einsum("m,mi,mj->ij", q_mean, pols, grads)
        force = (e / c) * (da.T @ v) - self.potential_gradient(f)
        gram = pols @ pols.T
        dvar = 2.0 * np.einsum("mn,mn,m,nj->j", cov, gram, vals, grads)
        force -= (e / c) ** 2 * dvar / (2 * m)
        return force

    # ---- field sector ---------------------------------------------------

    def coupling_diagonal(self, f: np.ndarray, pbar: np.ndarray, v_scalar_phase: float,
                          shape: tuple[int, ...]) -> np.ndarray:
        """Mean-field W({q}) = |pbar - (e/c) a(f;{q})|^2 / 2M + V(f) + H_delta."""
        e, c, m = self.charge, self.c, self.mass
        vals = self.mode_values_at(f)
        pols = self.polarizations()
        w = np.zeros(shape)
        d_p = pbar.size
        for i in range(d_p):
            comp = np.full(shape, pbar[i])
            for mm in range(self.n_modes):
                qgrid = self.axes[mm].points.reshape(
                    [-1 if ax == mm else 1 for ax in range(self.n_modes)]
                )
                comp = comp - (e / c) * vals[mm] * pols[mm, i] * qgrid
            w = w + comp * comp
        w = w / (2.0 * m) + self.potential(f) + v_scalar_phase
        return w

    def mode_propagators(self, tau: float) -> list[np.ndarray]:
        key = round(tau, 15)
        if key not in self._prop_cache:
            props = []
            for ops in self.axis_ops:
                phase = np.exp(-1j * ops.eigvals * tau / self.hbar)
                props.append((ops.eigvecs * phase) @ ops.eigvecs.conj().T)
            self._prop_cache[key] = props
        return self._prop_cache[key]


def _axis_broadcast(psi: ModeWaveFunction, axis_index: int, values: np.ndarray) -> np.ndarray:
    shape = [1] * psi.psi.ndim
    shape[axis_index] = values.size
    return values.reshape(shape)


@dataclass
class HybridState:
    """Classical data plus the field wavefunctional at one instant."""

    f: np.ndarray
    v: np.ndarray
    pbar: np.ndarray
    psi: ModeWaveFunction
    time: float
    regime: str = "mean-field"
    r_mean: Optional[np.ndarray] = None           # separately integrated E[r]
    f_table: Optional[np.ndarray] = None          # (n_designated, d_p)
    p_table: Optional[np.ndarray] = None
    designated_axis: int = 0

    def copy(self) -> "HybridState":
        return HybridState(
            f=self.f.copy(), v=self.v.copy(), pbar=self.pbar.copy(),
            psi=self.psi.copy(), time=self.time, regime=self.regime,
            r_mean=None if self.r_mean is None else self.r_mean.copy(),
            f_table=None if self.f_table is None else self.f_table.copy(),
            p_table=None if self.p_table is None else self.p_table.copy(),
            designated_axis=self.designated_axis,
        )

    def velocity_residual(self, system: HybridSystem) -> float:
        """Defect of v = (pbar - (e/c) a_mean(f)) / M, an accepted-step invariant."""
        moments = system.field_moments(self.psi)
        v_check = system.velocity(self.f, self.pbar, moments["q"])
        return float(np.max(np.abs(self.v - v_check)))


def make_mean_field_state(system: HybridSystem, f0, v0, psi: ModeWaveFunction) -> HybridState:
    f0 = np.atleast_1d(np.asarray(f0, dtype=float))
    v0 = np.atleast_1d(np.asarray(v0, dtype=float))
    moments = system.field_moments(psi)
    pbar = system.mass * v0 + (system.charge / system.c) * system.a_mean(f0, moments["q"])
    return HybridState(f=f0, v=v0, pbar=pbar, psi=psi.copy(), time=0.0,
                       regime="mean-field", r_mean=f0.copy())


def make_configuration_resolved_state(
    system: HybridSystem, f0, v0, psi: ModeWaveFunction, designated_axis: int = 0
) -> HybridState:
    """Tables start uniform across the designated-mode grid."""
    st = make_mean_field_state(system, f0, v0, psi)
    nq = system.axes[designated_axis].n
    d_p = st.f.size
    f_tab = np.tile(st.f, (nq, 1))
    # Uniform initial momentum: v matches the mean-field value at the centroid.
    p_tab = np.tile(st.pbar, (nq, 1))
    return replace(st, regime="configuration-resolved", f_table=f_tab, p_table=p_tab,
                   designated_axis=designated_axis)


# ---------------------------------------------------------------------------
# Stepping
# ---------------------------------------------------------------------------

def _rk4(y: np.ndarray, rhs: Callable[[np.ndarray], np.ndarray], dt: float) -> np.ndarray:
    k1 = rhs(y)
    k2 = rhs(y + 0.5 * dt * k1)
    k3 = rhs(y + 0.5 * dt * k2)
    k4 = rhs(y + dt * k3)
    return y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _apply_field_half_step(system: HybridSystem, psi: ModeWaveFunction,
                           w_diag: np.ndarray, tau: float) -> None:
    """exp(-i (H_f + W) tau / hbar), Strang-split: modes half, W full, modes half."""
    props = system.mode_propagators(tau / 2.0)
    for m, u in enumerate(props):
        psi.psi = psi.apply_axis_matrix(m, u)
    psi.psi = psi.psi * np.exp(-1j * w_diag * tau / system.hbar)
    for m, u in enumerate(props):
        psi.psi = psi.psi if u is None else psi.apply_axis_matrix(m, u)


def _mean_field_step(system: HybridSystem, state: HybridState, dt: float) -> HybridState:
    st = state.copy()
    shape = tuple(a.n for a in system.axes)
    # field half-step with frozen (f, pbar)
    hdelta = -float(st.v @ st.pbar)
    w = system.coupling_diagonal(st.f, st.pbar, hdelta, shape)
    _apply_field_half_step(system, st.psi, w, dt / 2.0)
    # classical full step with frozen field moments
    moments = system.field_moments(st.psi)
    d_p = st.f.size

    def rhs(y):
        f, p = y[:d_p], y[d_p:]
        vel = system.velocity(f, p, moments["q"])
        return np.concatenate([vel, system.classical_force(f, p, moments)])

    y = _rk4(np.concatenate([st.f, st.pbar]), rhs, dt)
    st.f, st.pbar = y[:d_p], y[d_p:]
    # field half-step with the advanced classical data
    hdelta = -float(system.velocity(st.f, st.pbar, moments["q"]) @ st.pbar)
    w = system.coupling_diagonal(st.f, st.pbar, hdelta, shape)
    _apply_field_half_step(system, st.psi, w, dt / 2.0)
    final_moments = system.field_moments(st.psi)
    st.v = system.velocity(st.f, st.pbar, final_moments["q"])
    st.time = state.time + dt
    st.r_mean = st.f.copy()  # dE[r]/dt = <v>_a = df/dt holds identically here
    return st


def _slice_amplitudes(system: HybridSystem, q_star: np.ndarray,
                      other_means: np.ndarray, designated: int) -> np.ndarray:
    """(n_q, K) mode amplitudes: the designated grid plus frozen means."""
    amps = np.tile(other_means, (q_star.size, 1))
    amps[:, designated] = q_star
    return amps


def _slice_values(system: HybridSystem, positions: np.ndarray) -> np.ndarray:
    """(n, K) mode profiles at a batch of particle positions."""
    return np.stack([cp.values(positions) for cp in system.couplings], axis=1)


def _slice_gradients(system: HybridSystem, positions: np.ndarray) -> np.ndarray:
    """(n, K, d_p) mode profile gradients at a batch of positions."""
    return np.stack([cp.gradients(positions) for cp in system.couplings], axis=1)


def _slice_rhs(system: HybridSystem, q_star: np.ndarray, other_means: np.ndarray,
               designated: int):
    """Per-slice classical RHS in the frozen field configuration of each slice."""
    e, c, m = system.charge, system.c, system.mass
    pols = system.polarizations()
    amps = _slice_amplitudes(system, q_star, other_means, designated)

    def rhs(y):
        d_p = y.shape[1] // 2
        f = y[:, :d_p]
        p = y[:, d_p:]
        vals = _slice_values(system, f)
        a = np.einsum("jm,jm,mi->ji", amps, vals, pols)
        v = (p - (e / c) * a) / m
        grads = _slice_gradients(system, f)
        # d a_i / d f_k per slice: sum_m amps * pol_m,i * grad_m,k
        da = np.einsum("jm,mi,jmk->jik", amps, pols, grads)
        force = (e / c) * np.einsum("jik,ji->jk", da, v) \
            - system.potential_gradients(f)
        return np.hstack([v, force])

    return rhs


def _configuration_resolved_step(system: HybridSystem, state: HybridState, dt: float) -> HybridState:
    st = state.copy()
    designated = st.designated_axis
    q_star = system.axes[designated].points
    shape = tuple(a.n for a in system.axes)
    moments = system.field_moments(st.psi)
    other_means = moments["q"]

    amps = _slice_amplitudes(system, q_star, other_means, designated)

    def w_from_tables(f_tab, p_tab):
        e, c, m = system.charge, system.c, system.mass
        pols = system.polarizations()
        vals = _slice_values(system, f_tab)
        a = np.einsum("jm,jm,mi->ji", amps, vals, pols)
        v = (p_tab - (e / c) * a) / m
        w_slice = 0.5 * m * np.sum(v * v, axis=1) \
            + system.potential_values(f_tab) \
            - np.sum(v * p_tab, axis=1)  # H_delta = -v . pbar per configuration
        return _axis_broadcast_values(w_slice, designated, shape), v

    w, _ = w_from_tables(st.f_table, st.p_table)
    _apply_field_half_step(system, st.psi, w, dt / 2.0)

    rhs = _slice_rhs(system, q_star, other_means, designated)
    y = _rk4(np.hstack([st.f_table, st.p_table]), rhs, dt)
    d_p = st.f.size
    st.f_table, st.p_table = y[:, :d_p], y[:, d_p:]

    w, v_tab = w_from_tables(st.f_table, st.p_table)
    _apply_field_half_step(system, st.psi, w, dt / 2.0)

    # E[r] integrates the rho-averaged velocity; <f>_a is read from the tables.
    rho = st.psi.marginal(designated)
    dq = system.axes[designated].dq
    mean_v = (rho[:, None] * v_tab).sum(axis=0) * dq
    st.r_mean = state.r_mean + dt * mean_v
    st.f = (rho[:, None] * st.f_table).sum(axis=0) * dq
    st.pbar = (rho[:, None] * st.p_table).sum(axis=0) * dq
    st.v = mean_v
    st.time = state.time + dt
    return st


def _axis_broadcast_values(values: np.ndarray, axis_index: int, shape: tuple[int, ...]) -> np.ndarray:
    view = [1] * len(shape)
    view[axis_index] = shape[axis_index]
    return np.broadcast_to(values.reshape(view), shape).copy()


def step_hybrid(system: HybridSystem, state: HybridState, dt: float,
                _depth: int = 0) -> HybridState:
    """Advance one Strang step: field half, classical full, field half.

    Non-finite classical data (e.g. an undefined phase gradient at a
    wavefunction node) rejects the step and retries with dt halved, up to
    ``MAX_STEP_HALVINGS`` times.  The particle position is wrapped into
    the periodic cell by the coupling's trigonometric evaluation, so no
    explicit wrap is needed.
    """
    stepper = _mean_field_step if state.regime == "mean-field" else _configuration_resolved_step
    try:
        new = stepper(system, state, dt)
        bad = not (
            np.all(np.isfinite(new.f)) and np.all(np.isfinite(new.pbar))
            and np.all(np.isfinite(new.v)) and np.all(np.isfinite(new.psi.psi))
        )
    except FloatingPointError:
        bad = True
        new = None
    if bad:
        if _depth >= MAX_STEP_HALVINGS:
            raise StepRejectedError(
                f"step rejected {MAX_STEP_HALVINGS} times at t={state.time}"
            )
        half = step_hybrid(system, state, dt / 2.0, _depth + 1)
        return step_hybrid(system, half, dt / 2.0, _depth + 1)
    return new


def run_hybrid(system: HybridSystem, state: HybridState, dt: float, n_steps: int,
               sample_every: int = 1) -> list[HybridState]:
    """Integrate and return the sampled history (including the initial state)."""
    history = [state.copy()]
    current = state
    for step in range(n_steps):
        current = step_hybrid(system, current, dt)
        if (step + 1) % sample_every == 0:
            history.append(current.copy())
    return history


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

@dataclass
class HybridEnergyLedger:
    times: np.ndarray
    values: np.ndarray
    max_relative_drift: float


def total_energy(system: HybridSystem, state: HybridState) -> float:
    if state.regime == "mean-field":
        moments = system.field_moments(state.psi)
        return system.classical_energy(state.f, state.pbar, moments) \
            + system.field_energy(state.psi)
    designated = state.designated_axis
    q_star = system.axes[designated].points
    moments = system.field_moments(state.psi)
    e, c, m = system.charge, system.c, system.mass
    pols = system.polarizations()
    vals = _slice_values(system, state.f_table)
    amps = _slice_amplitudes(system, q_star, moments["q"], designated)
    a = np.einsum("jm,jm,mi->ji", amps, vals, pols)
    v = (state.p_table - (e / c) * a) / m
    w_slice = 0.5 * m * np.sum(v * v, axis=1) + system.potential_values(state.f_table)
    rho = state.psi.marginal(designated)
    classical = float(np.sum(rho * w_slice) * system.axes[designated].dq)
    return classical + system.field_energy(state.psi)


def energy_ledger(system: HybridSystem, history: Sequence[HybridState]) -> HybridEnergyLedger:
    """<H>_a along a run and its maximal relative drift."""
    if len(history) < 2:
        raise HybridError("need at least two samples for a ledger")
    times = np.array([st.time for st in history])
    values = np.array([total_energy(system, st) for st in history])
    scale = max(abs(values[0]), 1e-30)
    drift = float(np.max(np.abs(values - values[0])) / scale)
    return HybridEnergyLedger(times, values, drift)


@dataclass
class CurrentDecomposition:
    """Transverse-current bookkeeping per kept mode.

    ``total`` is conduction + displacement by definition; the Ampere
    residuals measure how well each variant closes the measured
    d<eps>/dt.
    """

    times: np.ndarray
    conduction: np.ndarray      # (n_t, K)
    displacement: np.ndarray    # (n_t, K)

    @property
    def total(self) -> np.ndarray:
        return self.conduction + self.displacement

    def displacement_norm(self) -> float:
        return float(np.max(np.abs(self.displacement)))


@dataclass
class ExtendedEhrenfestReport:
    times: np.ndarray
    observables: dict[str, np.ndarray]
    residual_with_displacement: float
    residual_without_displacement: float
    continuity_residual: float
    faraday_residual: float
    order_parameter_gap: np.ndarray
    currents: CurrentDecomposition


def extended_ehrenfest(
    system: HybridSystem,
    history: Sequence[HybridState],
    continuity_wavenumbers: Optional[np.ndarray] = None,
) -> ExtendedEhrenfestReport:
    """Expectation-equation audit of a hybrid run.

    Per kept mode the measured d<eps_m>/dt is compared against the free
    restoring term plus the conduction current alone and plus the
    displacement contribution.  The displacement estimator uses only the
    classical tables: c * < d/dt ( pbar . d f / d q* ) >, with the q*
    derivative taken by central differences on the table grid and the
    time derivative along the stored history; it is identically zero in
    the mean-field regime and for uncharged particles.

    Charge continuity is checked in Fourier modes of the charge density,
    rho_k = e <exp(-i k . f)>, against the material current
    e <(v + u* df/dq*) exp(-i k f)>: the advective piece accounts for
    charge carried by the configuration flow and vanishes in mean field.
    """
    if len(history) < 3:
        raise HybridError("need at least 3 samples for centered differences")
    times = np.array([st.time for st in history])
    dt = times[1] - times[0]
    k_modes = system.n_modes
    n_t = len(history)
    hbar, c = system.hbar, system.c
    e = system.charge

    q_mean = np.empty((n_t, k_modes))
    eps_mean = np.empty((n_t, k_modes))
    conduction = np.empty((n_t, k_modes))
    displacement = np.zeros((n_t, k_modes))
    gap = np.empty(n_t)
    pols = system.polarizations()

    resolved = history[0].regime == "configuration-resolved"
    designated = history[0].designated_axis
    if resolved:
        q_star = system.axes[designated].points
        dq = system.axes[designated].dq
        g_series = np.empty((n_t, q_star.size))
        u_series = np.empty((n_t, q_star.size))
        rho_series = np.empty((n_t, q_star.size))
        v_series = np.empty((n_t, q_star.size, history[0].f.size))

    for i, st in enumerate(history):
        moments = system.field_moments(st.psi)
        q_mean[i] = moments["q"]
        eps_mean[i] = moments["eps"]
        if not resolved:
            vals = system.mode_values_at(st.f)
            conduction[i] = e * vals * (pols @ st.v)
            gap[i] = float(np.max(np.abs(st.r_mean - st.f)))
        else:
            rho = st.psi.marginal(designated)
            rho_series[i] = rho
            vals = _slice_values(system, st.f_table)
            amps = _slice_amplitudes(system, q_star, moments["q"], designated)
            a = np.einsum("jm,jm,mi->ji", amps, vals, pols)
            v_tab = (st.p_table - (e / c) * a) / system.mass
            v_series[i] = v_tab
            for m in range(k_modes):
                integrand = vals[:, m] * (v_tab @ pols[m])
                conduction[i, m] = e * float(np.sum(rho * integrand) * dq)
            df_dq = np.gradient(st.f_table, dq, axis=0)
            g_series[i] = np.sum(st.p_table * df_dq, axis=1)
            u_series[i] = _mode_flow_velocity(system, st, designated)
            f_mean = (rho[:, None] * st.f_table).sum(axis=0) * dq
            gap[i] = float(np.max(np.abs(st.r_mean - f_mean)))

    if resolved:
        gdot = np.zeros_like(g_series)
        gdot[1:-1] = (g_series[2:] - g_series[:-2]) / (2.0 * dt)
        displacement[:, designated] = c * np.sum(rho_series * gdot, axis=1) * dq
        displacement[0] = displacement[-1] = 0.0

    currents = CurrentDecomposition(times, conduction, displacement)

    deps = (eps_mean[2:] - eps_mean[:-2]) / (2.0 * dt)
    restoring = (system.omegas ** 2 / c) * q_mean[1:-1]
    res_without = deps + restoring - conduction[1:-1]
    res_with = res_without - displacement[1:-1]
    dq_dt = (q_mean[2:] - q_mean[:-2]) / (2.0 * dt)
    faraday = dq_dt - c * eps_mean[1:-1]

    # continuity in charge Fourier modes (1D particle space)
    if continuity_wavenumbers is None:
        continuity_wavenumbers = np.array([])
    cont_res = 0.0
    if continuity_wavenumbers.size and history[0].f.size == 1:
        for k in continuity_wavenumbers:
            rho_k = np.empty(n_t, dtype=complex)
            j_k = np.empty(n_t, dtype=complex)
            for i, st in enumerate(history):
                if not resolved:
                    rho_k[i] = e * np.exp(-1j * k * st.f[0])
                    j_k[i] = e * st.v[0] * np.exp(-1j * k * st.f[0])
                else:
                    rho = rho_series[i]
                    phase = np.exp(-1j * k * history[i].f_table[:, 0])
                    rho_k[i] = e * np.sum(rho * phase) * dq
                    df_dq = np.gradient(history[i].f_table[:, 0], dq)
                    vel = v_series[i][:, 0] + u_series[i] * df_dq
                    j_k[i] = e * np.sum(rho * vel * phase) * dq
            drho = (rho_k[2:] - rho_k[:-2]) / (2.0 * dt)
            cont_res = max(cont_res, float(np.max(np.abs(drho + 1j * k * j_k[1:-1]))))

    return ExtendedEhrenfestReport(
        times=times,
        observables={
            "q_mean": q_mean, "eps_mean": eps_mean,
            "conduction": conduction, "displacement": displacement,
        },
        residual_with_displacement=float(np.max(np.abs(res_with))),
        residual_without_displacement=float(np.max(np.abs(res_without))),
        continuity_residual=cont_res,
        faraday_residual=float(np.max(np.abs(faraday))),
        order_parameter_gap=gap,
        currents=currents,
    )


def _mode_flow_velocity(system: HybridSystem, state: HybridState, axis_index: int) -> np.ndarray:
    """Probability-flow velocity of the designated mode amplitude.

    u(q*) = hbar c^2 Im(psi* d psi / d q*) / |psi|^2 on the marginalized
    axis, floor-masked where the density is negligible.
    """
    psi = state.psi
    d1 = system.axis_ops[axis_index].first_derivative
    dpsi = psi.apply_axis_matrix(axis_index, d1)
    other = tuple(i for i in range(psi.psi.ndim) if i != axis_index)
    w_other = psi.weight / system.axes[axis_index].dq
    current = np.imag(np.conj(psi.psi) * dpsi).sum(axis=other) * w_other
    rho = psi.marginal(axis_index)
    floor = 1e-12 * float(np.max(rho))
    u = np.zeros_like(rho)
    ok = rho > floor
    u[ok] = system.hbar * system.c ** 2 * current[ok] / rho[ok]
    return u


# ---------------------------------------------------------------------------
# Quasi-trajectory tables
# ---------------------------------------------------------------------------

@dataclass
class QuasiTrajectoryTable:
    """Trajectories f(a*, t) integrated per frozen designated-mode amplitude."""

    q_star: np.ndarray
    times: np.ndarray
    f: np.ndarray       # (n_q, n_t, d_p)
    p: np.ndarray
    truncated: bool = False


def quasi_trajectory_table(
    system: HybridSystem,
    f0: np.ndarray,
    p0: np.ndarray,
    q_star: np.ndarray,
    t_final: float,
    n_steps: int,
    other_means: Optional[np.ndarray] = None,
    designated: int = 0,
    density: Optional[np.ndarray] = None,
    density_floor: float = 0.0,
) -> QuasiTrajectoryTable:
    """Integrate the classical trajectory once per frozen field amplitude.

    Each grid value a* of the designated mode defines a static field
    configuration; the trajectory ODE df/dt = (p - (e/c) a(f; a*))/M with
    its per-slice canonical force is integrated independently for each,
    exposing f as a function of the configuration.  When a probe density
    is supplied, grid points below ``density_floor`` are dropped (the
    table is flagged truncated).
    """
    q_star = np.asarray(q_star, dtype=float).reshape(-1)
    truncated = False
    if density is not None:
        keep = np.asarray(density) > density_floor
        truncated = not bool(np.all(keep))
        q_star = q_star[keep]
    f0 = np.atleast_1d(np.asarray(f0, dtype=float))
    p0 = np.atleast_1d(np.asarray(p0, dtype=float))
    if other_means is None:
        other_means = np.zeros(system.n_modes)
    nq, d_p = q_star.size, f0.size
    dt = t_final / n_steps
    times = dt * np.arange(n_steps + 1)
    f_out = np.empty((nq, n_steps + 1, d_p))
    p_out = np.empty((nq, n_steps + 1, d_p))
    y = np.hstack([np.tile(f0, (nq, 1)), np.tile(p0, (nq, 1))])
    f_out[:, 0], p_out[:, 0] = y[:, :d_p], y[:, d_p:]
    rhs = _slice_rhs(system, q_star, other_means, designated)
    for i in range(n_steps):
        y = _rk4(y, rhs, dt)
        f_out[:, i + 1], p_out[:, i + 1] = y[:, :d_p], y[:, d_p:]
    return QuasiTrajectoryTable(q_star, times, f_out, p_out, truncated)


def history_to_csv(system: HybridSystem, history: Sequence[HybridState], path) -> None:
    """Time series of the classical data plus per-mode field expectations."""
    k = system.n_modes
    with open(path, "w") as fh:
        d_p = history[0].f.size
        cols = ["time"]
        cols += [f"f{i}" for i in range(d_p)]
        cols += [f"v{i}" for i in range(d_p)]
        cols += [f"q{m}" for m in range(k)] + [f"eps{m}" for m in range(k)]
        cols += ["energy"]
        fh.write(",".join(cols) + "\n")
        for st in history:
            moments = system.field_moments(st.psi)
            row = [st.time, *st.f, *st.v, *moments["q"], *moments["eps"],
                   total_energy(system, st)]
            fh.write(",".join(f"{x:.17g}" for x in row) + "\n")
