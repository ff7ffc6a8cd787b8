"""Wiener-process ensembles and forward/backward diffusion integration.

The integrator is Euler-Maruyama with additive noise (weak order 1 for
the drift fields used here).  Randomness is counter-based: every path
owns a Philox stream keyed by (seed, path index), so ensembles are
bit-identical for any chunking or worker layout.

Forward and backward drifts of the same density are tied by

    backward = forward - diffusion_coeff * grad(log rho)

which is the relation the consistency-residual report measures; it
follows from requiring the forward and backward Fokker-Planck equations
to evolve the same density.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "SdeError",
    "SdeIntegrationError",
    "InsufficientSupportError",
    "WienerStream",
    "TrajectoryEnsemble",
    "DriftField",
    "DensityEstimate",
    "integrate_forward",
    "mean_forward_derivative",
    "mean_backward_derivative",
    "pooled_drift_estimates",
    "estimate_density",
    "verify_consistency",
    "drift_from_gaussian_ground_state",
    "ensemble_to_binary",
    "ensemble_from_binary",
    "ensemble_to_csv",
]

DENSITY_FLOOR_FRACTION = 1e-6   # of max(rho); log-density gradients are unreliable below
MIN_BIN_COUNT = 30              # samples required for a conditional-mean bin


class SdeError(RuntimeError):
    pass


class SdeIntegrationError(SdeError):
    """Non-finite drift encountered; carries the offending (path, step)."""

    def __init__(self, path: int, step: int):
        super().__init__(f"non-finite drift at path={path}, step={step}")
        self.path = path
        self.step = step


class InsufficientSupportError(SdeError):
    """Density below the floor on the whole probe set."""


@dataclass(frozen=True)
class WienerStream:
    """Counter-based Gaussian increment source.

    The increment block for a path depends only on (seed, path index), so
    any execution order reproduces identical ensembles.
    """

    seed: int
    dt: float

    def path_normals(self, path_index: int, n_steps: int, dof: int) -> np.ndarray:
        key = np.array([self.seed & 0xFFFFFFFFFFFFFFFF,
                        path_index & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
        gen = np.random.Generator(np.random.Philox(key=key))
        return gen.standard_normal((n_steps, dof))

    def block_normals(self, path_start: int, n_paths: int, n_steps: int, dof: int) -> np.ndarray:
        out = np.empty((n_paths, n_steps, dof))
        for i in range(n_paths):
            out[i] = self.path_normals(path_start + i, n_steps, dof)
        return out


@dataclass
class TrajectoryEnsemble:
    """Sample paths on a shared time grid.

    ``paths`` has shape (path_count, n_saved, dof); ``times`` holds the
    saved instants.  ``diffusion_coeff`` is the squared noise amplitude
    (hbar/M for particles, hbar*c^2 for mode coordinates,
    hbar*c^2/(dx)^d per site for lattice fields).
    """

    times: np.ndarray
    paths: np.ndarray
    direction: str
    diffusion_coeff: float
    dt: float
    seed: int

    @property
    def path_count(self) -> int:
        return self.paths.shape[0]

    @property
    def dof(self) -> int:
        return self.paths.shape[2]

    def at_time(self, t: float) -> np.ndarray:
        idx = self.time_index(t)
        return self.paths[:, idx, :]

    def time_index(self, t: float) -> int:
        idx = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[idx] - t) > 1e-9 * max(1.0, abs(t)):
            raise SdeError(f"time {t} not on the saved grid")
        return idx


@dataclass(frozen=True)
class DriftField:
    """Forward/backward drift pair with the log-density gradient source.

    All three callables take (x, t) with x of shape (n, dof) and return
    arrays of the same shape.  ``diffusion_coeff`` is the squared noise
    amplitude entering the consistency relation.
    """

    forward: Callable[[np.ndarray, float], np.ndarray]
    backward: Callable[[np.ndarray, float], np.ndarray]
    grad_log_density: Callable[[np.ndarray, float], np.ndarray]
    diffusion_coeff: float


def integrate_forward(
    drift: Callable[[np.ndarray, float], np.ndarray],
    init: np.ndarray,
    n_steps: int,
    stream: WienerStream,
    diffusion_coeff: float,
    t0: float = 0.0,
    save_every: int = 1,
    save_steps: Optional[set] = None,
    projector: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    chunk_size: Optional[int] = None,
    direction: str = "forward",
) -> TrajectoryEnsemble:
    """Euler-Maruyama ensemble integration.

    ``init`` is (path_count, dof).  ``projector`` (when given) is applied
    to each noise increment, e.g. the transverse projector for lattice
    field noise.  ``save_steps`` selects an explicit set of step indices
    to store instead of the uniform ``save_every`` stride (step 0 is
    always stored).  Backward integration is expressed by the caller as a
    forward run in reversed time; ``direction`` only labels the result.
    """
    dt = stream.dt
    if dt <= 0:
        raise SdeError(f"dt must be positive, got {dt}")
    if diffusion_coeff < 0:
        raise SdeError("diffusion coefficient must be nonnegative")
    init = np.atleast_2d(np.asarray(init, dtype=float))
    n_paths, dof = init.shape
    if save_steps is not None:
        saved_idx = sorted({0} | {s for s in save_steps if 0 <= s <= n_steps})
    else:
        saved_idx = list(range(0, n_steps + 1, save_every))
        if saved_idx[-1] != n_steps and n_steps % save_every == 0:
            saved_idx.append(n_steps)
    slot_of = {s: i for i, s in enumerate(saved_idx)}
    if chunk_size is None:
        chunk_size = max(1, min(n_paths, int(2e7) // max(1, n_steps * dof)))
    times = t0 + dt * np.asarray(saved_idx, dtype=float)
    paths = np.empty((n_paths, len(saved_idx), dof))
    amp = np.sqrt(diffusion_coeff * dt)
    for start in range(0, n_paths, chunk_size):
        stop = min(start + chunk_size, n_paths)
        x = init[start:stop].copy()
        noise = stream.block_normals(start, stop - start, n_steps, dof) if amp > 0 else None
        paths[start:stop, 0, :] = x
        t = t0
        for step in range(n_steps):
            b = np.asarray(drift(x, t), dtype=float)
            if not np.all(np.isfinite(b)):
                bad = np.argwhere(~np.isfinite(b))[0]
                raise SdeIntegrationError(path=start + int(bad[0]), step=step)
            x = x + b * dt
            if amp > 0:
                dw = noise[:, step, :]
                if projector is not None:
                    dw = projector(dw)
                x = x + amp * dw
            t = t0 + (step + 1) * dt
            slot = slot_of.get(step + 1)
            if slot is not None:
                paths[start:stop, slot, :] = x
    return TrajectoryEnsemble(times, paths, direction, diffusion_coeff, dt, stream.seed)


@dataclass(frozen=True)
class BinnedDerivative:
    centers: np.ndarray
    values: np.ndarray
    counts: np.ndarray
    std_error: np.ndarray
    valid: np.ndarray  # bins with at least MIN_BIN_COUNT samples


def _binned_conditional_mean(cond: np.ndarray, incr: np.ndarray, n_bins: int) -> BinnedDerivative:
    lo, hi = np.min(cond), np.max(cond)
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, n_bins + 1)
    which = np.clip(np.digitize(cond, edges) - 1, 0, n_bins - 1)
    counts = np.bincount(which, minlength=n_bins)
    sums = np.bincount(which, weights=incr, minlength=n_bins)
    sq = np.bincount(which, weights=incr ** 2, minlength=n_bins)
    safe = np.maximum(counts, 1)
    mean = sums / safe
    var = np.maximum(sq / safe - mean ** 2, 0.0)
    se = np.sqrt(var / safe)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return BinnedDerivative(centers, mean, counts, se, counts >= MIN_BIN_COUNT)


def mean_forward_derivative(ens: TrajectoryEnsemble, t: float, n_bins: int = 32) -> BinnedDerivative:
    """Conditional mean of (x(t+dt) - x(t))/dt given x(t), histogram-binned.

    Only scalar (dof = 1) ensembles are binned; empty bins are flagged via
    ``valid`` and excluded from residual norms downstream.
    """
    if ens.dof != 1:
        raise SdeError("conditional binning is implemented for scalar ensembles")
    idx = ens.time_index(t)
    if idx + 1 >= len(ens.times):
        raise SdeError("t + dt is outside the saved window")
    dt = ens.times[idx + 1] - ens.times[idx]
    x0 = ens.paths[:, idx, 0]
    incr = (ens.paths[:, idx + 1, 0] - x0) / dt
    return _binned_conditional_mean(x0, incr, n_bins)


def mean_backward_derivative(ens: TrajectoryEnsemble, t: float, n_bins: int = 32) -> BinnedDerivative:
    """Conditional mean of (x(t) - x(t-dt))/dt given x(t)."""
    if ens.dof != 1:
        raise SdeError("conditional binning is implemented for scalar ensembles")
    idx = ens.time_index(t)
    if idx == 0:
        raise SdeError("t - dt is outside the saved window")
    dt = ens.times[idx] - ens.times[idx - 1]
    x1 = ens.paths[:, idx, 0]
    incr = (x1 - ens.paths[:, idx - 1, 0]) / dt
    return _binned_conditional_mean(x1, incr, n_bins)


def pooled_drift_estimates(ens: TrajectoryEnsemble, t_lo: float, t_hi: float,
                           n_bins: int = 30) -> tuple[BinnedDerivative, BinnedDerivative, np.ndarray]:
    """Forward/backward conditional drifts with increments pooled over a window.

    For (quasi-)stationary ensembles the increments of every saved slice
    in [t_lo, t_hi] are statistically exchangeable, which beats the
    single-slice estimator variance by the slice count.  Returns the
    forward and backward binned estimates plus the pooled condition
    samples (for density estimation on the same footing).  Requires the
    window to be saved at every step.
    """
    if ens.dof != 1:
        raise SdeError("conditional binning is implemented for scalar ensembles")
    idx = np.nonzero((ens.times >= t_lo - 1e-12) & (ens.times <= t_hi + 1e-12))[0]
    if idx.size < 3:
        raise SdeError("window too narrow for pooled estimation")
    dts = np.diff(ens.times[idx])
    if np.max(np.abs(dts - ens.dt)) > 1e-9 * ens.dt:
        raise SdeError("pooled estimation needs every step saved in the window")
    interior = idx[1:-1]
    x_all, fwd_all, bwd_all = [], [], []
    for i in interior:
        x_here = ens.paths[:, i, 0]
        x_all.append(x_here)
        fwd_all.append((ens.paths[:, i + 1, 0] - x_here) / ens.dt)
        bwd_all.append((x_here - ens.paths[:, i - 1, 0]) / ens.dt)
    x_all = np.concatenate(x_all)
    fwd = _binned_conditional_mean(x_all, np.concatenate(fwd_all), n_bins)
    bwd = _binned_conditional_mean(x_all, np.concatenate(bwd_all), n_bins)
    return fwd, bwd, x_all


@dataclass
class DensityEstimate:
    """Gaussian-kernel density on a grid, quadrature-normalized."""

    grid: np.ndarray
    values: np.ndarray
    bandwidth: float
    coverage_defect: float  # |raw grid mass - 1| before renormalization

    def floor(self) -> float:
        return DENSITY_FLOOR_FRACTION * float(np.max(self.values))

    def grad_log(self) -> np.ndarray:
        """Gradient of log density on the grid, floor-masked (NaN below floor)."""
        vals = np.where(self.values > self.floor(), self.values, np.nan)
        return np.gradient(np.log(vals), self.grid)


def estimate_density(samples: np.ndarray, grid: np.ndarray, bandwidth: float) -> DensityEstimate:
    """Gaussian KDE of scalar samples, normalized on the grid.

    Statistical accuracy targets assume >= 100 paths, but any sample count
    is accepted (a single path yields its kernel bump).
    """
    if bandwidth <= 0:
        raise SdeError(f"bandwidth must be positive, got {bandwidth}")
    samples = np.asarray(samples, dtype=float).reshape(-1)
    grid = np.asarray(grid, dtype=float)
    vals = np.zeros_like(grid)
    chunk = max(1, int(5e6) // max(1, grid.size))
    for start in range(0, samples.size, chunk):
        part = samples[start:start + chunk]
        z = (grid[:, None] - part[None, :]) / bandwidth
        vals += np.exp(-0.5 * z * z).sum(axis=1)
    vals /= samples.size * bandwidth * np.sqrt(2.0 * np.pi)
    mass = np.trapezoid(vals, grid)
    if mass <= 0:
        raise SdeError("density mass vanished on the grid; widen the grid")
    return DensityEstimate(grid, vals / mass, bandwidth, abs(mass - 1.0))


@dataclass(frozen=True)
class ConsistencyReport:
    max_residual: float
    l2_residual: float
    relative_residual: float
    reference_norm: float
    support_fraction: float


def verify_consistency(
    forward: np.ndarray,
    backward: np.ndarray,
    grad_log_rho: np.ndarray,
    density: np.ndarray,
    diffusion_coeff: float,
) -> ConsistencyReport:
    """Residual of backward - forward + diffusion_coeff * grad(log rho).

    All inputs are sampled on a common probe grid; probes where the
    density is below the floor (or any input is non-finite) are excluded.
    The relative residual is normalized by the density-weighted norm of
    the osmotic term itself.
    """
    forward = np.asarray(forward, dtype=float)
    backward = np.asarray(backward, dtype=float)
    grad_log_rho = np.asarray(grad_log_rho, dtype=float)
    density = np.asarray(density, dtype=float)
    floor = DENSITY_FLOOR_FRACTION * np.max(density)
    osmotic = diffusion_coeff * grad_log_rho
    residual = backward - forward + osmotic
    ok = (density > floor) & np.isfinite(residual) & np.isfinite(osmotic)
    if not np.any(ok):
        raise InsufficientSupportError("density below floor on every probe point")
    w = density[ok] / np.sum(density[ok])
    l2 = float(np.sqrt(np.sum(w * residual[ok] ** 2)))
    ref = float(np.sqrt(np.sum(w * osmotic[ok] ** 2)))
    return ConsistencyReport(
        max_residual=float(np.max(np.abs(residual[ok]))),
        l2_residual=l2,
        relative_residual=l2 / ref if ref > 0 else l2,
        reference_norm=ref,
        support_fraction=float(np.mean(ok)),
    )


def drift_from_gaussian_ground_state(omega: float, hbar: float, mass: float) -> DriftField:
    """Analytic drift pair of the stationary Gaussian with variance hbar/(2 M omega).

    The forward drift -omega*x is purely osmotic (the current velocity of
    a real wavefunction vanishes); the backward drift is +omega*x.
    """
    coeff = hbar / mass

    def fwd(x, t):
        return -omega * x

    def bwd(x, t):
        return omega * x

    def grad_log(x, t):
        return -(2.0 * mass * omega / hbar) * x

    return DriftField(fwd, bwd, grad_log, coeff)


# ---------------------------------------------------------------------------
# Export formats
# ---------------------------------------------------------------------------

_BINARY_MAGIC = b"QSDE"


def ensemble_to_binary(ens: TrajectoryEnsemble, path) -> None:
    """Columnar little-endian dump: header (dims, dt), times, float64 body."""
    with open(path, "wb") as fh:
        fh.write(_BINARY_MAGIC)
        header = np.array([ens.path_count, len(ens.times), ens.dof], dtype="<i8")
        header.tofile(fh)
        np.array([ens.dt, ens.diffusion_coeff], dtype="<f8").tofile(fh)
        np.array([ens.seed], dtype="<i8").tofile(fh)
        fh.write(ens.direction.encode().ljust(8, b"\0")[:8])
        ens.times.astype("<f8").tofile(fh)
        ens.paths.astype("<f8").tofile(fh)


def ensemble_from_binary(path) -> TrajectoryEnsemble:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _BINARY_MAGIC:
            raise SdeError(f"not an ensemble dump: bad magic {magic!r}")
        p, n, dof = np.fromfile(fh, dtype="<i8", count=3)
        dt, coeff = np.fromfile(fh, dtype="<f8", count=2)
        seed = int(np.fromfile(fh, dtype="<i8", count=1)[0])
        direction = fh.read(8).rstrip(b"\0").decode()
        times = np.fromfile(fh, dtype="<f8", count=int(n))
        body = np.fromfile(fh, dtype="<f8", count=int(p * n * dof))
    return TrajectoryEnsemble(times, body.reshape(int(p), int(n), int(dof)),
                              direction, float(coeff), float(dt), seed)


def ensemble_to_csv(ens: TrajectoryEnsemble, path) -> None:
    """Long-format CSV (path, time, components); only for small runs."""
    with open(path, "w") as fh:
        cols = ",".join(f"x{i}" for i in range(ens.dof))
        fh.write(f"path,time,{cols}\n")
        for p in range(ens.path_count):
            for j, t in enumerate(ens.times):
                row = ",".join(f"{v:.17g}" for v in ens.paths[p, j])
                fh.write(f"{p},{t:.17g},{row}\n")
