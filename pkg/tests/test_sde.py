import numpy as np
import pytest

from oracles import fokker_planck_1d, heat_kernel_density
from qchlab import lattice, sde
from qchlab.sde import (
    InsufficientSupportError,
    SdeError,
    SdeIntegrationError,
    WienerStream,
    drift_from_gaussian_ground_state,
    ensemble_from_binary,
    ensemble_to_binary,
    ensemble_to_csv,
    estimate_density,
    integrate_forward,
    mean_backward_derivative,
    mean_forward_derivative,
    verify_consistency,
)

SEED = 91823


def zero_drift(x, t):
    return np.zeros_like(x)


# ---------------------------------------------------------------------------
# Wiener streams
# ---------------------------------------------------------------------------

def test_increments_are_reproducible_per_path():
    s = WienerStream(SEED, 0.01)
    a = s.path_normals(7, 100, 2)
    b = s.path_normals(7, 100, 2)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, s.path_normals(8, 100, 2))


def test_increment_statistics():
    s = WienerStream(SEED, 0.01)
    block = s.block_normals(0, 400, 50, 1)
    assert abs(block.mean()) < 3.0 / np.sqrt(block.size)
    assert abs(block.var() - 1.0) < 4.0 / np.sqrt(block.size)


def test_ensembles_bit_identical_for_any_chunking():
    init = np.zeros((64, 1))
    kw = dict(n_steps=50, stream=WienerStream(SEED, 0.01), diffusion_coeff=0.5)
    a = integrate_forward(zero_drift, init, chunk_size=64, **kw)
    b = integrate_forward(zero_drift, init, chunk_size=7, **kw)
    assert np.array_equal(a.paths, b.paths)


# ---------------------------------------------------------------------------
# forward integration
# ---------------------------------------------------------------------------

def test_pure_brownian_variance_scaling():
    n_paths, n_steps, dt, s2 = 10_000, 100, 0.01, 0.7
    ens = integrate_forward(zero_drift, np.zeros((n_paths, 1)), n_steps,
                            WienerStream(SEED, dt), diffusion_coeff=s2)
    final = ens.paths[:, -1, 0]
    target = s2 * n_steps * dt
    se = target * np.sqrt(2.0 / (n_paths - 1))
    assert abs(final.var() - target) < 3 * se


def test_stationary_oscillator_stays_stationary():
    # forward drift -omega x holds the Gaussian ground-state density fixed
    omega, hbar, mass = 1.0, 1.0, 1.0
    n_paths, n_steps, dt = 100_000, 1000, 0.002
    rng = np.random.default_rng(3)
    sigma2 = hbar / (2 * mass * omega)
    init = np.sqrt(sigma2) * rng.standard_normal((n_paths, 1))
    drift = drift_from_gaussian_ground_state(omega, hbar, mass)
    ens = integrate_forward(drift.forward, init, n_steps, WienerStream(SEED, dt),
                            diffusion_coeff=hbar / mass, save_every=n_steps)
    assert abs(ens.paths[:, -1, 0].var() / sigma2 - 1.0) < 0.02


def test_zero_diffusion_reduces_to_euler_ode():
    dt, n = 0.001, 1000
    drift = lambda x, t: -np.sin(x)
    ens = integrate_forward(drift, np.array([[1.0]]), n, WienerStream(1, dt),
                            diffusion_coeff=0.0)
    x = 1.0
    for _ in range(n):
        x = x + dt * (-np.sin(x))
    assert abs(ens.paths[0, -1, 0] - x) < 1e-14


def test_nonfinite_drift_reports_path_and_step():
    def bad(x, t):
        out = np.zeros_like(x)
        if t > 0.05:
            out[3] = np.nan
        return out

    with pytest.raises(SdeIntegrationError) as err:
        integrate_forward(bad, np.zeros((8, 1)), 100, WienerStream(SEED, 0.01),
                          diffusion_coeff=0.0)
    assert err.value.path == 3
    assert err.value.step > 0


def test_save_steps_subset():
    ens = integrate_forward(zero_drift, np.zeros((4, 1)), 100,
                            WienerStream(SEED, 0.01), diffusion_coeff=1.0,
                            save_steps={10, 11, 50})
    assert np.allclose(ens.times, [0.0, 0.1, 0.11, 0.5])


def test_bad_parameters():
    with pytest.raises(SdeError):
        integrate_forward(zero_drift, np.zeros((2, 1)), 10, WienerStream(1, -0.1), 1.0)
    with pytest.raises(SdeError):
        integrate_forward(zero_drift, np.zeros((2, 1)), 10, WienerStream(1, 0.1), -1.0)


# ---------------------------------------------------------------------------
# conditional derivative estimators
# ---------------------------------------------------------------------------

def test_mean_derivative_deterministic_is_exact_difference():
    drift = lambda x, t: -0.5 * x
    ens = integrate_forward(drift, np.linspace(-1, 1, 600).reshape(-1, 1), 10,
                            WienerStream(1, 0.01), diffusion_coeff=0.0)
    est = mean_forward_derivative(ens, 0.05, n_bins=10)
    x = est.centers[est.valid]
    assert x.size > 0
    assert np.max(np.abs(est.values[est.valid] + 0.5 * x)) < 3e-3  # O(dt) bias only


def test_mean_derivative_brownian_is_zero():
    # per-bin z-scores: 10 bins tested jointly, so allow the 4-sigma tail
    ens = integrate_forward(zero_drift, np.zeros((40_000, 1)), 20,
                            WienerStream(SEED, 0.01), diffusion_coeff=1.0)
    est = mean_forward_derivative(ens, 0.1, n_bins=12)
    ok = est.valid
    assert np.all(np.abs(est.values[ok]) < 4.0 * est.std_error[ok] + 1e-9)


def test_mean_derivatives_recover_stationary_drift():
    # single-slice bins are noise-limited; pooling the stationary window
    # brings the estimator variance down to the few-percent target
    omega, hbar, mass = 1.0, 1.0, 1.0
    dt, n_steps, n_paths = 0.02, 60, 60_000
    rng = np.random.default_rng(11)
    init = np.sqrt(0.5) * rng.standard_normal((n_paths, 1))
    drift = drift_from_gaussian_ground_state(omega, hbar, mass)
    ens = integrate_forward(drift.forward, init, n_steps, WienerStream(SEED + 1, dt),
                            diffusion_coeff=hbar / mass)
    fwd, bwd, _ = sde.pooled_drift_estimates(ens, 0.4, 1.2, n_bins=24)
    for est, sign in ((fwd, +1.0), (bwd, -1.0)):
        ok = est.valid
        x = est.centers[ok]
        w = np.exp(-x ** 2)
        w /= w.sum()
        rel = np.sqrt(np.sum(w * (est.values[ok] + sign * omega * x) ** 2)
                      / np.sum(w * (omega * x) ** 2))
        assert rel < 0.05


def test_derivative_estimators_window_errors():
    ens = integrate_forward(zero_drift, np.zeros((200, 1)), 10,
                            WienerStream(SEED, 0.01), diffusion_coeff=1.0)
    with pytest.raises(SdeError):
        mean_forward_derivative(ens, 0.1)  # t + dt leaves the window
    with pytest.raises(SdeError):
        mean_backward_derivative(ens, 0.0)


# ---------------------------------------------------------------------------
# density estimation
# ---------------------------------------------------------------------------

def test_brownian_density_matches_heat_kernel():
    s2, t = 1.0, 0.25
    n_paths = 100_000
    ens = integrate_forward(zero_drift, np.zeros((n_paths, 1)), 25,
                            WienerStream(SEED + 2, 0.01), diffusion_coeff=s2,
                            save_every=25)
    grid = np.linspace(-3, 3, 301)
    est = estimate_density(ens.paths[:, -1, 0], grid, bandwidth=0.06)
    exact = heat_kernel_density(grid, t, s2)
    assert np.trapezoid(np.abs(est.values - exact), grid) < 0.03


def test_stationary_density_matches_ground_state():
    omega, hbar, mass = 1.0, 1.0, 1.0
    rng = np.random.default_rng(7)
    init = np.sqrt(0.5) * rng.standard_normal((100_000, 1))
    drift = drift_from_gaussian_ground_state(omega, hbar, mass)
    ens = integrate_forward(drift.forward, init, 200, WienerStream(SEED + 3, 0.005),
                            diffusion_coeff=1.0, save_every=200)
    grid = np.linspace(-3, 3, 301)
    est = estimate_density(ens.paths[:, -1, 0], grid, bandwidth=0.08)
    exact = np.exp(-mass * omega * grid ** 2 / hbar) / np.sqrt(np.pi * hbar / (mass * omega))
    assert np.trapezoid(np.abs(est.values - exact), grid) < 0.03


def test_single_path_kernel_bump():
    grid = np.linspace(-1, 1, 401)
    est = estimate_density(np.array([0.2]), grid, bandwidth=0.05)
    assert abs(np.trapezoid(est.values, grid) - 1.0) < 1e-9
    assert abs(grid[np.argmax(est.values)] - 0.2) < 0.01


def test_bad_bandwidth():
    with pytest.raises(SdeError):
        estimate_density(np.zeros(10), np.linspace(-1, 1, 11), 0.0)


# ---------------------------------------------------------------------------
# consistency conditions
# ---------------------------------------------------------------------------

def test_consistency_analytic_gaussian_drifts():
    omega, hbar, mass = 1.3, 1.0, 0.8
    drift = drift_from_gaussian_ground_state(omega, hbar, mass)
    x = np.linspace(-2, 2, 101)
    rho = np.exp(-mass * omega * x ** 2 / hbar)
    rep = verify_consistency(drift.forward(x, 0), drift.backward(x, 0),
                             drift.grad_log_density(x, 0), rho, hbar / mass)
    assert rep.max_residual < 1e-10
    assert rep.support_fraction == 1.0


def test_consistency_field_mode_gaussian():
    # mode-amplitude Gaussian stationary state: forward/backward mode drifts
    # tied by  backward = forward - (hbar c^2) d log rho / d a
    hbar, c, omega = 1.0, 1.0, 0.8
    coeff = hbar * c * c
    var = hbar * c * c / (2 * omega)
    a = np.linspace(-3, 3, 151)
    rho = np.exp(-a ** 2 / (2 * var))
    grad_log = -a / var
    u_fwd = 0.5 * coeff * grad_log  # purely osmotic: stationary functional
    u_bwd = u_fwd - coeff * grad_log
    rep = verify_consistency(u_fwd, u_bwd, grad_log, rho, coeff)
    assert rep.max_residual < 1e-10


def test_consistency_insufficient_support():
    x = np.linspace(-1, 1, 11)
    with pytest.raises(InsufficientSupportError):
        verify_consistency(x, x, np.full_like(x, np.nan), np.ones_like(x), 1.0)


# ---------------------------------------------------------------------------
# Fokker-Planck cross-check and time-reversal duality
# ---------------------------------------------------------------------------

def test_empirical_density_matches_grid_fokker_planck():
    # relaxing (not stationary) oscillator ensemble against a direct grid
    # integration of the density equation with the same drift
    omega, s2 = 1.0, 1.0
    dt, n_steps, n_paths = 0.002, 500, 100_000
    t_final = dt * n_steps
    rng = np.random.default_rng(23)
    sig0 = 0.4  # narrower than stationary: density relaxes outward
    init = sig0 * rng.standard_normal((n_paths, 1)) + 0.5
    drift = lambda x, t: -omega * x
    ens = integrate_forward(drift, init, n_steps, WienerStream(SEED + 5, dt),
                            diffusion_coeff=s2, save_every=n_steps)
    grid = np.linspace(-4, 4, 401)
    rho0 = np.exp(-((grid - 0.5) ** 2) / (2 * sig0 ** 2)) / np.sqrt(2 * np.pi * sig0 ** 2)
    rho_fp = fokker_planck_1d(grid, rho0, lambda x, t: -omega * x, s2,
                              t_final, 4000)
    est = estimate_density(ens.paths[:, -1, 0], grid, bandwidth=0.07)
    assert np.trapezoid(np.abs(est.values - rho_fp), grid) < 0.05


def test_forward_backward_duality():
    # generate forward, then integrate the backward SDE in reversed time from
    # the final marginal; marginals must match within sampling error
    omega, hbar, mass = 1.0, 1.0, 1.0
    dt, n_steps, n_paths = 0.005, 200, 40_000
    t_final = dt * n_steps
    rng = np.random.default_rng(4)
    init = np.sqrt(0.5) * rng.standard_normal((n_paths, 1))
    drift = drift_from_gaussian_ground_state(omega, hbar, mass)
    fwd = integrate_forward(drift.forward, init, n_steps, WienerStream(SEED + 6, dt),
                            diffusion_coeff=hbar / mass, save_every=50)

    def reversed_drift(x, s):
        return -drift.backward(x, t_final - s)

    bwd = integrate_forward(reversed_drift, fwd.paths[:, -1, :], n_steps,
                            WienerStream(SEED + 7, dt), diffusion_coeff=hbar / mass,
                            save_every=50, direction="backward")
    grid = np.linspace(-3, 3, 201)
    for s_idx, t_idx in [(2, 2), (4, 0)]:
        a = estimate_density(bwd.paths[:, s_idx, 0], grid, 0.1).values
        b = estimate_density(fwd.paths[:, t_idx, 0], grid, 0.1).values
        assert np.trapezoid(np.abs(a - b), grid) < 0.05


def test_field_noise_transversality(cube_spec):
    proj = lattice.build_projector(cube_spec)
    div = lattice.divergence_matrix(cube_spec)
    stream = WienerStream(SEED + 8, 0.01)
    ens = integrate_forward(zero_drift, np.zeros((4, 3 * cube_spec.n_sites)), 20,
                            stream, diffusion_coeff=1.0,
                            projector=lambda dw: dw @ proj.matrix.T)
    for j in range(ens.paths.shape[1]):
        assert np.max(np.abs(ens.paths[:, j, :] @ div.T)) < 1e-10


# ---------------------------------------------------------------------------
# export formats
# ---------------------------------------------------------------------------

def test_binary_round_trip(tmp_path):
    ens = integrate_forward(zero_drift, np.zeros((5, 2)), 10,
                            WienerStream(SEED, 0.01), diffusion_coeff=0.3)
    path = tmp_path / "dump.qsde"
    ensemble_to_binary(ens, path)
    back = ensemble_from_binary(path)
    assert np.array_equal(back.paths, ens.paths)
    assert np.array_equal(back.times, ens.times)
    assert back.diffusion_coeff == ens.diffusion_coeff
    assert back.direction == ens.direction


def test_csv_export(tmp_path):
    ens = integrate_forward(zero_drift, np.zeros((2, 1)), 4,
                            WienerStream(SEED, 0.01), diffusion_coeff=0.3)
    path = tmp_path / "dump.csv"
    ensemble_to_csv(ens, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "path,time,x0"
    assert len(lines) == 1 + 2 * 5
