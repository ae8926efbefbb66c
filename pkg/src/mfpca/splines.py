"""Penalized spline basis in mixed-model form, and design matrices.

The basis starts from cubic B-splines on equally spaced interior knots over
[0, 1].  The curvature penalty is diagonalized, its null space (constant and
linear functions) is dropped in favour of explicit intercept/slope columns,
and the remaining directions are rescaled so the penalty on their
coefficients is the identity.  Each penalized function is additionally
L2-projected against {1, t} so the columns are numerically orthogonal to the
unpenalized part.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from .errors import ConfigurationError

MIN_SPLINES = 4
NULLSPACE_REL_TOL = 1e-10

# 3-point Gauss-Legendre on [-1, 1]; exact for quintics, enough for products
# of cubic-spline pieces and their derivatives.
_GL_NODES = np.array([-np.sqrt(3.0 / 5.0), 0.0, np.sqrt(3.0 / 5.0)])
_GL_WEIGHTS = np.array([5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0])


@dataclass(frozen=True)
class SplineBasis:
    """K penalized spline functions z_1..z_K on [0, 1] plus their raw-B-spline map."""

    num_splines: int
    interior_knots: np.ndarray
    knot_vector: np.ndarray
    transform: np.ndarray  # (num_raw_bsplines, K)

    @property
    def num_columns(self) -> int:
        """Columns of the full design: intercept, slope, K penalized functions."""
        return self.num_splines + 2

    def evaluate(self, times: np.ndarray) -> np.ndarray:
        """Evaluate z_1..z_K at the given times, returning (len(times), K)."""
        times = _check_times(times)
        if times.size == 0:
            return np.zeros((0, self.num_splines))
        raw = _raw_design(times, self.knot_vector)
        return raw @ self.transform


@dataclass(frozen=True)
class EvaluationGrid:
    """Equidistant grid on [0, 1] with its precomputed design matrix."""

    times: np.ndarray
    design: np.ndarray

    @property
    def size(self) -> int:
        return self.times.size


def build_basis(num_splines: int) -> SplineBasis:
    """Construct the penalized basis with ``num_splines`` functions.

    Uses num_splines - 2 equally spaced interior knots, so the cubic B-spline
    curvature penalty has exactly num_splines positive eigenvalues.
    """
    if num_splines < MIN_SPLINES:
        raise ConfigurationError(
            f"num_splines={num_splines} below the minimum {MIN_SPLINES} supported "
            "by the cubic B-spline construction")
    n_interior = num_splines - 2
    interior = np.linspace(0.0, 1.0, n_interior + 2)[1:-1]
    kv = np.concatenate([np.zeros(4), interior, np.ones(4)])
    n_raw = len(kv) - 4  # cubic B-spline count

    omega = _penalty_matrix(kv, n_raw)
    eigval, eigvec = np.linalg.eigh(omega)
    tol = NULLSPACE_REL_TOL * eigval.max()
    positive = eigval > tol
    if positive.sum() != num_splines:
        raise ConfigurationError(
            f"penalty rank {int(positive.sum())} does not match num_splines={num_splines}")
    transform = eigvec[:, positive] / np.sqrt(eigval[positive])
    transform = _canonical_signs(transform)

    # Remove the L2 component of {1, t} from each penalized function.  Both
    # are exactly representable by the raw basis (partition of unity and
    # Greville abscissae), so the correction stays a raw-coefficient map and
    # leaves the curvature penalty untouched.
    coeff_one = np.ones(n_raw)
    coeff_t = (kv[1:n_raw + 1] + kv[2:n_raw + 2] + kv[3:n_raw + 3]) / 3.0
    moments = _l2_moments(kv, n_raw, transform)  # rows: integral of z_k, of t*z_k
    gram = np.array([[1.0, 0.5], [0.5, 1.0 / 3.0]])
    proj = np.linalg.solve(gram, moments)
    transform = transform - np.column_stack([coeff_one, coeff_t]) @ proj

    return SplineBasis(num_splines=num_splines, interior_knots=interior,
                       knot_vector=kv, transform=transform)


def design_matrix(basis: SplineBasis, times: np.ndarray) -> np.ndarray:
    """Design matrix [1, t, z_1(t), ..., z_K(t)] for the given times."""
    times = _check_times(times)
    out = np.empty((times.size, basis.num_columns))
    out[:, 0] = 1.0
    out[:, 1] = times
    out[:, 2:] = basis.evaluate(times)
    return out


def evaluation_grid(basis: SplineBasis, grid_size: int) -> EvaluationGrid:
    """Equidistant grid of ``grid_size`` points including both endpoints."""
    if grid_size < 2:
        raise ConfigurationError(f"grid_size={grid_size} must be at least 2")
    times = np.linspace(0.0, 1.0, grid_size)
    return EvaluationGrid(times=times, design=design_matrix(basis, times))


def raw_bspline_design(times: np.ndarray, num_basis: int) -> np.ndarray:
    """Plain cubic B-spline design on equally spaced interior knots.

    Unpenalized, used for synthetic ground-truth functions.
    """
    if num_basis < 4:
        raise ConfigurationError("cubic B-splines need at least 4 basis functions")
    interior = np.linspace(0.0, 1.0, num_basis - 2)[1:-1]
    kv = np.concatenate([np.zeros(4), interior, np.ones(4)])
    times = _check_times(times)
    if times.size == 0:
        return np.zeros((0, num_basis))
    return _raw_design(times, kv)


def _check_times(times: np.ndarray) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1:
        times = times.reshape(-1)
    if times.size and (times.min() < 0.0 or times.max() > 1.0):
        raise ValueError("design times must lie in [0, 1]")
    return times


def _raw_design(times: np.ndarray, kv: np.ndarray) -> np.ndarray:
    return BSpline.design_matrix(times, kv, 3).toarray()


def _gl_points(kv: np.ndarray):
    """Gauss-Legendre nodes/weights over each distinct knot span."""
    breaks = np.unique(kv)
    lo, hi = breaks[:-1], breaks[1:]
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    nodes = (mid[:, None] + half[:, None] * _GL_NODES[None, :]).ravel()
    weights = (half[:, None] * _GL_WEIGHTS[None, :]).ravel()
    return nodes, weights


def _penalty_matrix(kv: np.ndarray, n_raw: int) -> np.ndarray:
    """Exact integral of second-derivative cross-products of the raw basis."""
    nodes, weights = _gl_points(kv)
    d2 = BSpline(kv, np.eye(n_raw), 3).derivative(2)(nodes)
    return (d2 * weights[:, None]).T @ d2


def _l2_moments(kv: np.ndarray, n_raw: int, transform: np.ndarray) -> np.ndarray:
    """Exact integrals of z_k and t*z_k for every penalized function."""
    nodes, weights = _gl_points(kv)
    z = _raw_design(nodes, kv) @ transform
    return np.vstack([weights @ z, (weights * nodes) @ z])


def _canonical_signs(transform: np.ndarray) -> np.ndarray:
    """Fix eigenvector sign ambiguity: largest-magnitude coefficient positive."""
    idx = np.argmax(np.abs(transform), axis=0)
    signs = np.sign(transform[idx, np.arange(transform.shape[1])])
    signs[signs == 0] = 1.0
    return transform * signs
