"""Independent oracles used by the test suite.

Each oracle is written against the mathematical definition, not against
the code paths it checks, and the derivations are frozen here.

Displaced-oscillator loop-phase oracle
--------------------------------------

The benchmark Hamiltonian for one mode driven on both quadratures is

    H(f) = (eps^2 + (omega/c)^2 q^2) / 2 + kappa (f_x q + f_y eps),

with [q, eps] = i hbar c =: h_eff.  Completing the squares,

    H = (eps - P_c)^2 / 2 + (omega/c)^2 (q - Q_c)^2 / 2 + const,
    Q_c = -kappa c^2 f_x / omega^2,      P_c = -kappa f_y,

so every eigenstate is the number state chi_n displaced rigidly to the
phase-space point (Q_c, P_c):

    phi_n = D(Q_c, P_c) chi_n,   D(Q, P) = exp[(i/h_eff)(P q - Q eps)].

For a closed parameter loop, d/dt D * D^dagger = dX + [dX, X]/2 with
X = (i/h_eff)(P q - Q eps), and the commutator is the c-number
-(i/h_eff)(P dQ - Q dP).  Since <chi_n| q |chi_n> = <chi_n| eps |chi_n> = 0,

    i <phi_n | d phi_n> = (P dQ - Q dP) / (2 h_eff)

for every level n, and the loop connection integral is

    i \oint <phi_n | d phi_n> = -(1/h_eff) * SignedArea(Q_c, P_c),

with SignedArea = (1/2) \oint (Q dP - P dQ) positive for
counterclockwise (Q, P) loops.  The discrete overlap product
Prod_j <phi(t_j) | phi(t_{j+1})> accumulates exp(<phi|dphi>), whose
argument is minus the connection integral, so

    arg Prod = + SignedArea(Q_c, P_c) / h_eff.

For the circle f = center + R (cos s*w*t, sin s*w*t) with orientation
s = +-1, the displacement ellipse has semi-axes kappa c^2 R / omega^2
and kappa R traversed with the same orientation, hence

    gamma = s * pi * kappa^2 c^2 R^2 / (omega^2 hbar c)
          = s * pi * kappa^2 c R^2 / (hbar omega^2).

A segment retraces itself, enclosing zero area: gamma = 0.  Reversing
the loop flips s; traversing it twice doubles the area.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "displaced_loop_phase",
    "fokker_planck_1d",
    "madelung_step_1d",
    "coupled_oscillator_frequencies",
    "heat_kernel_density",
]


def displaced_loop_phase(kappa: float, radius_x: float, radius_y: float,
                         omega: float, hbar: float, c: float,
                         orientation: int) -> float:
    """Closed-form loop phase derived in the module docstring."""
    area = np.pi * (kappa * c * c * radius_x / omega ** 2) * (kappa * radius_y)
    return orientation * area / (hbar * c)


def heat_kernel_density(grid: np.ndarray, t: float, diffusion_coeff: float,
                        x0: float = 0.0) -> np.ndarray:
    """Solution of the zero-drift Fokker-Planck equation from a point source.

    With dx = b dt + sqrt(s2) dW and b = 0, the density obeys
    d rho/dt = (s2/2) rho'' and the delta initial condition spreads into a
    Gaussian of variance s2 * t.
    """
    var = diffusion_coeff * t
    return np.exp(-((grid - x0) ** 2) / (2.0 * var)) / np.sqrt(2.0 * np.pi * var)


def fokker_planck_1d(grid: np.ndarray, rho0: np.ndarray,
                     drift_of_x_t, diffusion_coeff: float,
                     t_final: float, n_steps: int) -> np.ndarray:
    """Direct grid integration of d rho/dt = -(b rho)' + (s2/2) rho''.

    Conservative central differences on a fixed grid, RK4 in time; the
    density is held at zero on the boundary (benchmarks keep all mass in
    the interior).  Completely independent of the sampling path it
    cross-checks.
    """
    dx = grid[1] - grid[0]
    dt = t_final / n_steps
    rho = rho0.copy()

    def rhs(r, t):
        b = drift_of_x_t(grid, t)
        flux = b * r
        out = np.zeros_like(r)
        out[1:-1] = -(flux[2:] - flux[:-2]) / (2 * dx) \
            + 0.5 * diffusion_coeff * (r[2:] - 2 * r[1:-1] + r[:-2]) / dx ** 2
        return out

    t = 0.0
    for _ in range(n_steps):
        k1 = rhs(rho, t)
        k2 = rhs(rho + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = rhs(rho + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = rhs(rho + dt * k3, t + dt)
        rho = rho + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += dt
    return rho


def madelung_step_1d(grid: np.ndarray, rho: np.ndarray, theta: np.ndarray,
                     potential: np.ndarray, hbar: float, mass: float,
                     dt: float, n_steps: int):
    """Amplitude-phase (hydrodynamic) integration of the 1D wave equation.

    Evolves the continuity equation d rho/dt = -(rho v)' with
    v = (hbar/m) theta' together with the phase equation

        hbar d theta/dt = -( m v^2 / 2 + V - (hbar^2/2m) (sqrt(rho))''/sqrt(rho) ),

    using spectral derivatives and RK4.  Valid while rho stays nodeless;
    this is the dual route to the unitary grid evolution.
    """
    n = grid.size
    dx = grid[1] - grid[0]
    k = 2.0 * np.pi * np.fft.fftfreq(n, d=dx)
    # 2/3-rule dealiasing: the smooth solution lives at low k; the filter
    # keeps tail roundoff in the quantum-potential term from ringing up
    mask = np.abs(k) <= (2.0 / 3.0) * np.max(np.abs(k))

    def ddx(f):
        return np.real(np.fft.ifft(mask * 1j * k * np.fft.fft(f)))

    def d2dx(f):
        return np.real(np.fft.ifft(mask * -(k ** 2) * np.fft.fft(f)))

    def rhs(y):
        r, th = y
        r = np.maximum(r, 1e-300)
        v = (hbar / mass) * ddx(th)
        amp = np.sqrt(r)
        quantum_pot = -(hbar ** 2 / (2 * mass)) * d2dx(amp) / amp
        drho = -ddx(r * v)
        dth = -(0.5 * mass * v * v + potential + quantum_pot) / hbar
        return np.array([drho, dth])

    y = np.array([rho, theta])
    for _ in range(n_steps):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * dt * k1)
        k3 = rhs(y + 0.5 * dt * k2)
        k4 = rhs(y + dt * k3)
        y = y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y[0], y[1]


def coupled_oscillator_frequencies(mass: float, omega_trap: float,
                                   omega_mode: float, charge: float,
                                   profile: float, c: float = 1.0) -> np.ndarray:
    """Normal frequencies of the linearized charge-mode pair.

    At a profile antinode the classical equations close on (f, E) with
    E the mode's momentum-like quadrature:

        f'' = -omega_trap^2 f - (e c / M) w E
        E'' = -(omega_mode^2 + e^2 w^2 / M) E - (e / c) w omega_trap^2 f

    (w the mode profile value at the trap minimum).  The two normal
    frequencies are the square roots of the eigenvalues of minus that
    2x2 coefficient matrix.
    """
    k = charge * profile
    m2 = np.array([
        [omega_trap ** 2, k * c / mass],
        [k * omega_trap ** 2 / c, omega_mode ** 2 + k ** 2 / mass],
    ])
    vals = np.linalg.eigvals(m2)
    return np.sort(np.sqrt(np.real(vals)))
