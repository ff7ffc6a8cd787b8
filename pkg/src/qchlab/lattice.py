"""Periodic spatial lattices, discrete differential operators, and the
Coulomb-gauge transverse projector.

All derivative operators are built from the central-difference matrix
``D_i`` (antisymmetric, circulant), so that partial integration holds
exactly on the lattice and the composite identities (laplacian =
divergence of gradient, divergence of curl = 0) are exact in floating
point.  The transverse projector is

    P = 1 - D_i  L+  D_j

with ``L = sum_i D_i^2`` and ``L+`` its Moore-Penrose pseudoinverse.  On a
periodic lattice ``L`` is singular: the null space contains the constant
mode and, on even site counts, the alternating (Nyquist) modes that
central differences cannot see.  The default "drop" policy freezes that
whole sector (``L+`` maps it to zero), which makes P the exact orthogonal
projector onto the kernel of the discrete divergence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "LatticeError",
    "SingularLaplacianError",
    "TruncationError",
    "LatticeSpec",
    "DiscreteOperator",
    "TransverseProjector",
    "VectorFieldConfig",
    "Mode",
    "ModeBasis",
    "gradient_matrix",
    "divergence_matrix",
    "curl_matrix",
    "laplacian_matrix",
    "build_projector",
    "project_fourier",
    "decompose_modes",
    "interpolate_field",
    "export_diagnostics",
]


class LatticeError(ValueError):
    """Invalid lattice specification or field shape."""


class SingularLaplacianError(LatticeError):
    """Raised when the zero-mode policy forbids inverting a singular laplacian."""


class TruncationError(LatticeError):
    """Requested more modes than the lattice supports."""


@dataclass(frozen=True)
class LatticeSpec:
    """Periodic lattice: site counts per axis and the grid spacing.

    Boundary conditions are always periodic.  Immutable; safe to share
    across workers.
    """

    dims: tuple[int, ...]
    spacing: float

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        object.__setattr__(self, "dims", dims)
        if not 1 <= len(dims) <= 3:
            raise LatticeError(f"dimension must be 1, 2 or 3, got {len(dims)}")
        if any(n < 1 for n in dims):
            raise LatticeError(f"site counts must be positive, got {dims}")
        if not (np.isfinite(self.spacing) and self.spacing > 0):
            raise LatticeError(f"spacing must be finite and positive, got {self.spacing}")

    @property
    def dimension(self) -> int:
        return len(self.dims)

    @property
    def n_sites(self) -> int:
        return int(np.prod(self.dims))

    @property
    def cell_volume(self) -> float:
        """Quadrature weight of one site, (dx)^d."""
        return float(self.spacing ** self.dimension)

    @property
    def lengths(self) -> tuple[float, ...]:
        return tuple(n * self.spacing for n in self.dims)

    def site_coordinates(self) -> np.ndarray:
        """Coordinates of every site, shape (n_sites, dimension), C order."""
        axes = [np.arange(n) * self.spacing for n in self.dims]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def wavevectors(self) -> np.ndarray:
        """Integer wavevector index tuples, shape (n_sites, dimension)."""
        axes = [np.arange(n) for n in self.dims]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


def _shift_matrix(spec: LatticeSpec, axis: int, step: int) -> np.ndarray:
    """Permutation matrix S with (S f)(x) = f(x + step*e_axis), periodic."""
    shape = spec.dims
    idx = np.arange(spec.n_sites).reshape(shape)
    shifted = np.roll(idx, -step, axis=axis).ravel()
    s = np.zeros((spec.n_sites, spec.n_sites))
    s[np.arange(spec.n_sites), shifted] = 1.0
    return s


def gradient_matrix(spec: LatticeSpec, axis: int) -> np.ndarray:
    """Central-difference derivative along one axis (antisymmetric)."""
    if not 0 <= axis < spec.dimension:
        raise LatticeError(f"axis {axis} out of range for dimension {spec.dimension}")
    return (_shift_matrix(spec, axis, +1) - _shift_matrix(spec, axis, -1)) / (2.0 * spec.spacing)


def laplacian_matrix(spec: LatticeSpec) -> np.ndarray:
    """Scalar laplacian, exactly the divergence of the gradient."""
    lap = np.zeros((spec.n_sites, spec.n_sites))
    for ax in range(spec.dimension):
        d = gradient_matrix(spec, ax)
        lap += d @ d
    return lap


def divergence_matrix(spec: LatticeSpec) -> np.ndarray:
    """Row block [D_0 ... D_{d-1}] acting on component-major flat vectors."""
    blocks = [gradient_matrix(spec, ax) for ax in range(spec.dimension)]
    return np.hstack(blocks)


def curl_matrix(spec: LatticeSpec) -> np.ndarray:
    """Lattice curl.

    3D: maps vector fields to vector fields (component-major blocks).
    2D: maps vector fields to the scalar out-of-plane curl.
    1D has no curl.
    """
    d = spec.dimension
    s = spec.n_sites
    if d == 1:
        raise LatticeError("curl is undefined in one dimension")
    grads = [gradient_matrix(spec, ax) for ax in range(d)]
    if d == 2:
        return np.hstack([-grads[1], grads[0]])
    eps = np.zeros((3, 3, 3))
    for i, j, k in [(0, 1, 2), (1, 2, 0), (2, 0, 1)]:
        eps[i, j, k] = 1.0
        eps[i, k, j] = -1.0
    c = np.zeros((3 * s, 3 * s))
    for i in range(3):
        for k in range(3):
            block = np.zeros((s, s))
            for j in range(3):
                if eps[i, j, k]:
                    block += eps[i, j, k] * grads[j]
            c[i * s:(i + 1) * s, k * s:(k + 1) * s] = block
    return c


@dataclass(frozen=True)
class DiscreteOperator:
    """A lattice differential operator with its circulant matrix."""

    matrix: np.ndarray
    kind: str  # gradient-component | laplacian | curl-component | divergence
    spec: LatticeSpec
    axis: Optional[int] = None

    @staticmethod
    def gradient(spec: LatticeSpec, axis: int) -> "DiscreteOperator":
        return DiscreteOperator(gradient_matrix(spec, axis), "gradient-component", spec, axis)

    @staticmethod
    def laplacian(spec: LatticeSpec) -> "DiscreteOperator":
        return DiscreteOperator(laplacian_matrix(spec), "laplacian", spec)

    @staticmethod
    def divergence(spec: LatticeSpec) -> "DiscreteOperator":
        return DiscreteOperator(divergence_matrix(spec), "divergence", spec)

    @staticmethod
    def curl(spec: LatticeSpec) -> "DiscreteOperator":
        return DiscreteOperator(curl_matrix(spec), "curl-component", spec)

    def __call__(self, values: np.ndarray) -> np.ndarray:
        return self.matrix @ values


def modified_wavevector(spec: LatticeSpec, k_index: np.ndarray) -> np.ndarray:
    """Central-difference symbol k~_i = sin(k_i dx)/dx for integer indices.

    Entries that vanish identically (k_i dx a multiple of pi, i.e. the
    constant and Nyquist modes) are snapped to exact zeros so downstream
    null-sector masks are not defeated by sin(pi) roundoff.
    """
    k_index = np.atleast_2d(k_index)
    sines = np.sin(2.0 * np.pi * k_index / np.asarray(spec.dims))
    sines[np.abs(sines) < 1e-12] = 0.0
    return sines / spec.spacing


def null_wavevectors(spec: LatticeSpec) -> np.ndarray:
    """Wavevector indices where the central-difference symbol vanishes.

    Always contains k = 0; on even site counts it also contains the
    alternating (Nyquist) combinations.
    """
    kt = modified_wavevector(spec, spec.wavevectors())
    mask = np.all(np.abs(kt) < 1e-14 / spec.spacing, axis=1)
    return spec.wavevectors()[mask]


@dataclass(frozen=True)
class TransverseProjector:
    """Real-space Coulomb-gauge projector over (component, site) space.

    ``matrix`` is (d*S, d*S), component-major blocks.  ``zero_mode_policy``
    records how the singular sector of the inverse laplacian was treated;
    under "drop" the frozen sector is left untouched by the longitudinal
    subtraction (it is divergence-free already).
    """

    matrix: np.ndarray
    zero_mode_policy: str
    spec: LatticeSpec
    frozen_wavevectors: np.ndarray

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Project a field given as (..., d*S) flat or (*dims, d) array."""
        flat, restore = _flatten_field(self.spec, values)
        return restore(flat @ self.matrix.T)

    @property
    def frozen_mode_count(self) -> int:
        return int(self.frozen_wavevectors.shape[0])


def _flatten_field(spec: LatticeSpec, values: np.ndarray):
    """Accept (*dims, d), (S, d) or (..., d*S) layouts, return component-major
    flats plus a function restoring the original layout."""
    d, s = spec.dimension, spec.n_sites
    values = np.asarray(values, dtype=float)
    if values.shape == (*spec.dims, d):
        flat = np.moveaxis(values.reshape(s, d), -1, 0).reshape(d * s)

        def restore(out):
            return np.moveaxis(out.reshape(d, s), 0, -1).reshape(*spec.dims, d)

        return flat, restore
    if values.shape == (s, d):
        flat = values.T.reshape(d * s)

        def restore(out):
            return out.reshape(d, s).T

        return flat, restore
    if values.shape[-1] == d * s:
        return values, lambda out: out
    raise LatticeError(f"field shape {values.shape} does not match lattice {spec.dims} x {d}")


@dataclass(frozen=True)
class VectorFieldConfig:
    """A gauge-potential sample on the lattice, one d-vector per site."""

    spec: LatticeSpec
    values: np.ndarray  # (*dims, d)
    transverse: bool = False

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (*self.spec.dims, self.spec.dimension):
            raise LatticeError(
                f"values shape {vals.shape} does not match lattice {self.spec.dims}"
            )
        object.__setattr__(self, "values", vals)
        if self.transverse:
            defect = self.divergence_norm()
            if defect > 1e-10:
                raise LatticeError(f"field flagged transverse but |div|_inf = {defect:.3e}")

    def flat(self) -> np.ndarray:
        flat, _ = _flatten_field(self.spec, self.values)
        return flat

    def divergence_norm(self) -> float:
        div = divergence_matrix(self.spec) @ self.flat()
        return float(np.max(np.abs(div)))


def build_projector(spec: LatticeSpec, zero_mode_policy: str = "drop") -> TransverseProjector:
    """Assemble the dense transverse projector P = 1 - grad L+ grad.

    The pseudoinverse realizes the "drop" policy: the null sector of the
    central-difference laplacian (k=0 plus Nyquist combinations on even
    lattices) receives no longitudinal subtraction.  Policy "reject"
    raises instead of regularizing.
    """
    if zero_mode_policy not in ("drop", "reject"):
        raise LatticeError(f"unknown zero-mode policy {zero_mode_policy!r}")
    frozen = null_wavevectors(spec)
    if zero_mode_policy == "reject" and frozen.shape[0] > 0:
        raise SingularLaplacianError(
            f"laplacian is singular on {frozen.shape[0]} wavevector(s) and policy is 'reject'"
        )
    d, s = spec.dimension, spec.n_sites
    grads = [gradient_matrix(spec, ax) for ax in range(d)]
    lap = laplacian_matrix(spec)
    lap_pinv = np.linalg.pinv(lap, rcond=1e-12)
    p = np.eye(d * s)
    for i in range(d):
        gi_lp = grads[i] @ lap_pinv
        for j in range(d):
            p[i * s:(i + 1) * s, j * s:(j + 1) * s] -= gi_lp @ grads[j]
    return TransverseProjector(p, zero_mode_policy, spec, frozen)


def project_fourier(spec: LatticeSpec, values: np.ndarray) -> np.ndarray:
    """Mode-by-mode transverse projection via FFT.

    Applies delta_ij - k~_i k~_j / |k~|^2 for every wavevector with a
    nonzero central-difference symbol and the identity on the frozen
    sector.  Fast path for lattices too large for dense matrices; on small
    lattices it agrees with the dense projector to machine precision.
    """
    d = spec.dimension
    vals = np.asarray(values, dtype=float)
    grid = vals.reshape(*spec.dims, d)
    ft = np.fft.fftn(grid, axes=tuple(range(d)))
    kt = modified_wavevector(spec, spec.wavevectors()).reshape(*spec.dims, d)
    k2 = np.sum(kt * kt, axis=-1)
    safe = np.where(k2 > 0, k2, 1.0)
    dot = np.sum(kt * ft, axis=-1) / safe
    long = kt * dot[..., None]
    long[k2 == 0] = 0.0
    out = np.real(np.fft.ifftn(ft - long, axes=tuple(range(d))))
    return out.reshape(vals.shape)


# ---------------------------------------------------------------------------
# Normal modes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Mode:
    """One real normal mode of the free field on the lattice."""

    k_index: tuple[int, ...]
    k: np.ndarray                # physical wavevector 2*pi*n/(N*dx)
    polarization: np.ndarray     # unit vector, orthogonal to the lattice symbol
    omega: float
    parity: str                  # "cos" | "sin"
    frozen: bool = False


def _site_phases(spec: LatticeSpec, k_index: Sequence[int]) -> np.ndarray:
    coords = spec.site_coordinates()
    k = 2.0 * np.pi * np.asarray(k_index) / (np.asarray(spec.dims) * spec.spacing)
    return coords @ k


def _self_conjugate(spec: LatticeSpec, k_index: Sequence[int]) -> bool:
    """True when k and -k are the same lattice wavevector (sin partner vanishes)."""
    return all((2 * n) % dim == 0 for n, dim in zip(k_index, spec.dims))


def _canonical_wavevectors(spec: LatticeSpec):
    """One representative per {k, -k} orbit, k = 0 included."""
    seen = set()
    reps = []
    for idx in spec.wavevectors():
        tup = tuple(int(v) for v in idx)
        neg = tuple((-v) % n for v, n in zip(tup, spec.dims))
        if tup in seen or neg in seen:
            continue
        seen.add(tup)
        reps.append(tup)
    return reps


def _polarization_basis(kt: np.ndarray) -> list[np.ndarray]:
    """Deterministic orthonormal basis of the plane orthogonal to kt."""
    d = kt.shape[0]
    kap = kt / np.linalg.norm(kt)
    if d == 2:
        return [np.array([-kap[1], kap[0]])]
    ref_axis = int(np.argmin(np.abs(kap)))
    e_ref = np.zeros(3)
    e_ref[ref_axis] = 1.0
    e1 = e_ref - (e_ref @ kap) * kap
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(kap, e1)
    return [e1, e2]


@dataclass(frozen=True)
class ModeBasis:
    """Truncated normal-mode basis of the free-field energy.

    ``vectors`` columns are Euclidean-orthonormal over the flat
    (component-major) index space; dividing by sqrt((dx)^d) gives the
    basis orthonormal under the lattice inner product.  ``frozen_modes``
    records the zero-frequency sector excluded from dynamics but kept for
    kinematic (commutator) completeness.
    """

    spec: LatticeSpec
    scalar: bool
    modes: tuple[Mode, ...]
    vectors: np.ndarray          # (dof, K) Euclidean-orthonormal
    frozen_modes: tuple[Mode, ...]
    frozen_vectors: np.ndarray
    c: float = 1.0

    @property
    def truncation(self) -> int:
        return len(self.modes)

    @property
    def omegas(self) -> np.ndarray:
        return np.array([m.omega for m in self.modes])

    @property
    def weight(self) -> float:
        return self.spec.cell_volume

    def project(self, values: np.ndarray) -> np.ndarray:
        """Mode coordinates q_m = sqrt(h) e_m . a of a field sample."""
        if self.scalar:
            flat = np.asarray(values, dtype=float).reshape(-1)
        else:
            flat, _ = _flatten_field(self.spec, values)
        return np.sqrt(self.weight) * (self.vectors.T @ flat)

    def synthesize(self, coords: np.ndarray) -> np.ndarray:
        """Field sample from mode coordinates (inverse of :meth:`project`)."""
        flat = (self.vectors @ np.asarray(coords, dtype=float)) / np.sqrt(self.weight)
        if self.scalar:
            return flat.reshape(self.spec.dims)
        return np.moveaxis(flat.reshape(self.spec.dimension, self.spec.n_sites), 0, -1).reshape(
            *self.spec.dims, self.spec.dimension
        )

    def eval_at(self, point: np.ndarray) -> np.ndarray:
        """Lattice-normalized mode functions at an arbitrary point.

        Returns (K,) for scalar bases and (K, d) for vector ones.  Exact
        trigonometric evaluation; used for smooth particle-field coupling.
        """
        point = np.atleast_1d(np.asarray(point, dtype=float))
        out = []
        for m, norm in zip(self.modes, self._euclidean_norms()):
            phase = float(np.asarray(m.k) @ point)
            wave = np.cos(phase) if m.parity == "cos" else np.sin(phase)
            amp = norm * wave / np.sqrt(self.weight)
            out.append(amp if self.scalar else amp * m.polarization)
        return np.array(out)

    def eval_gradient_at(self, point: np.ndarray) -> np.ndarray:
        """Spatial gradient of :meth:`eval_at`: (K, d_space) or (K, d, d_space)."""
        point = np.atleast_1d(np.asarray(point, dtype=float))
        out = []
        for m, norm in zip(self.modes, self._euclidean_norms()):
            k = np.asarray(m.k)
            phase = float(k @ point)
            dwave = -np.sin(phase) * k if m.parity == "cos" else np.cos(phase) * k
            amp = norm * dwave / np.sqrt(self.weight)
            out.append(amp if self.scalar else np.outer(m.polarization, amp))
        return np.array(out)

    def _euclidean_norms(self) -> np.ndarray:
        s = self.spec.n_sites
        return np.array(
            [np.sqrt(1.0 / s) if _self_conjugate(self.spec, m.k_index) else np.sqrt(2.0 / s)
             for m in self.modes]
        )


def _mode_family(spec: LatticeSpec, scalar: bool, c: float):
    """All real modes, dynamical and frozen, unsorted."""
    d, s = spec.dimension, spec.n_sites
    dyn, frozen = [], []
    for k_idx in _canonical_wavevectors(spec):
        k_phys = 2.0 * np.pi * np.asarray(k_idx) / (np.asarray(spec.dims) * spec.spacing)
        phases = _site_phases(spec, k_idx)
        self_conj = _self_conjugate(spec, k_idx)
        parities = ["cos"] if self_conj else ["cos", "sin"]
        if scalar:
            # Nearest-neighbour gradient energy: omega = 2c/dx * |sin(k dx / 2)| in quadrature.
            om = (2.0 * c / spec.spacing) * np.sqrt(
                np.sum(np.sin(np.pi * np.asarray(k_idx) / np.asarray(spec.dims)) ** 2)
            )
            is_frozen = om < 1e-14
            for par in parities:
                wave = np.cos(phases) if par == "cos" else np.sin(phases)
                norm = np.linalg.norm(wave)
                if norm < 1e-12:
                    continue
                mode = Mode(tuple(k_idx), k_phys, np.array([1.0]), float(om), par, is_frozen)
                (frozen if is_frozen else dyn).append((mode, wave / norm))
        else:
            kt = modified_wavevector(spec, np.asarray(k_idx))[0]
            kt_norm = np.linalg.norm(kt)
            is_frozen = kt_norm * spec.spacing < 1e-14
            if is_frozen:
                pols = [np.eye(d)[i] for i in range(d)]
                om = 0.0
            else:
                pols = _polarization_basis(kt)
                om = c * kt_norm
            for pol in pols:
                for par in parities:
                    wave = np.cos(phases) if par == "cos" else np.sin(phases)
                    norm = np.linalg.norm(wave)
                    if norm < 1e-12:
                        continue
                    vec = np.concatenate([pol[i] * wave for i in range(d)]) / norm
                    mode = Mode(tuple(k_idx), k_phys, pol, float(om), par, is_frozen)
                    (frozen if is_frozen else dyn).append((mode, vec))
    return dyn, frozen


def decompose_modes(
    spec: LatticeSpec,
    truncation: Optional[int] = None,
    scalar: bool = False,
    c: float = 1.0,
) -> ModeBasis:
    """Lowest-frequency normal modes of the free field.

    Vector bases use the central-difference curl energy (omega = c |k~|),
    consistent with the projector algebra; the 1D scalar analog uses the
    nearest-neighbour gradient energy, omega_n = (2c/dx)|sin(pi n / N)|.
    Zero-frequency modes are frozen per the drop policy and reported
    separately.
    """
    if spec.dimension == 1 and not scalar:
        raise LatticeError("vector mode decomposition needs dimension >= 2; "
                           "use scalar=True for the 1D analog")
    dyn, frozen = _mode_family(spec, scalar, c)
    # Stable sort on frequency with a deterministic tie-break on (k, parity).
    dyn_sorted = sorted(
        dyn, key=lambda mv: (mv[0].omega, mv[0].k_index, mv[0].parity, tuple(mv[0].polarization))
    )
    total = len(dyn_sorted)
    keep = total if truncation is None else int(truncation)
    if keep > total:
        raise TruncationError(f"requested {keep} modes but only {total} are dynamical")
    kept = dyn_sorted[:keep]
    dof = spec.n_sites if scalar else spec.n_sites * spec.dimension
    vectors = (
        np.stack([v for _, v in kept], axis=1) if kept else np.zeros((dof, 0))
    )
    fvectors = (
        np.stack([v for _, v in frozen], axis=1) if frozen else np.zeros((dof, 0))
    )
    return ModeBasis(
        spec=spec,
        scalar=scalar,
        modes=tuple(m for m, _ in kept),
        vectors=vectors,
        frozen_modes=tuple(m for m, _ in frozen),
        frozen_vectors=fvectors,
        c=c,
    )


def interpolate_field(spec: LatticeSpec, values: np.ndarray, point: np.ndarray) -> np.ndarray:
    """Multilinear periodic interpolation of a site field at a point.

    Exact on lattice sites and for fields linear between neighbouring
    sites; constants are preserved.  ``values`` may be scalar (*dims*) or
    vector (*dims*, d).
    """
    vals = np.asarray(values, dtype=float)
    scalar = vals.shape == spec.dims
    if not scalar and vals.shape != (*spec.dims, spec.dimension):
        raise LatticeError(f"cannot interpolate field of shape {vals.shape}")
    point = np.atleast_1d(np.asarray(point, dtype=float))
    rel = point / spec.spacing
    base = np.floor(rel).astype(int)
    frac = rel - base
    out = 0.0
    for corner in np.ndindex(*(2,) * spec.dimension):
        weight = 1.0
        idx = []
        for ax, bit in enumerate(corner):
            weight *= frac[ax] if bit else (1.0 - frac[ax])
            idx.append((base[ax] + bit) % spec.dims[ax])
        out = out + weight * vals[tuple(idx)]
    return out


def export_diagnostics(
    path,
    spec: LatticeSpec,
    projector: Optional[TransverseProjector] = None,
    basis: Optional[ModeBasis] = None,
) -> None:
    """Write the projector matrix and mode table as a JSON diagnostic dump."""
    payload: dict = {
        "lattice": {
            "dims": list(spec.dims),
            "spacing": spec.spacing,
            "dimension": spec.dimension,
            "boundary": "periodic",
        }
    }
    if projector is not None:
        payload["projector"] = {
            "layout": "component-major, row-major",
            "zero_mode_policy": projector.zero_mode_policy,
            "frozen_wavevectors": projector.frozen_wavevectors.tolist(),
            "matrix": projector.matrix.tolist(),
        }
    if basis is not None:
        payload["modes"] = [
            {
                "k_index": list(m.k_index),
                "k": np.asarray(m.k).tolist(),
                "omega": m.omega,
                "parity": m.parity,
                "polarization": np.asarray(m.polarization).tolist(),
            }
            for m in basis.modes
        ]
        payload["frozen_mode_count"] = len(basis.frozen_modes)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
