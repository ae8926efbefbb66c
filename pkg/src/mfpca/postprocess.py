"""Post-inference orthonormalization into a functional PCA decomposition,
plus inner products, variance shares, trajectory prediction, and exports.

The pipeline evaluates the fitted mean and latent functions on an
equidistant grid, whitens the latent functions by SVD, decorrelates the
scores through a spectral decomposition of their covariance, and rescales
by function norms.  All orthogonality statements use the multivariate inner
product (the sum over variables of univariate L2 inner products), realized
by trapezoidal quadrature, so the SVD is taken in the quadrature-weighted
metric.  The fitted trajectories are left unchanged.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .engines import RawFit
from .errors import NumericalError
from .model import nu_moments, zeta_moments
from .splines import evaluation_grid

EIGENVALUE_FLOOR = 1e-30
NEAR_ZERO_EIGENVALUE = 1e-12


def trapezoid_weights(times: np.ndarray) -> np.ndarray:
    """Quadrature weights so that w @ f approximates the integral of f."""
    times = np.asarray(times, dtype=float)
    if times.size < 2:
        raise ValueError("need at least two grid points")
    w = np.zeros_like(times)
    dt = np.diff(times)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    return w


def h_inner(f: np.ndarray, g: np.ndarray, times: np.ndarray) -> float:
    """Multivariate inner product: sum over variables of univariate integrals.

    f and g are stacked p * n_g vectors over a shared grid; p is inferred.
    """
    f = np.asarray(f, dtype=float).reshape(-1)
    g = np.asarray(g, dtype=float).reshape(-1)
    if f.shape != g.shape:
        raise ValueError(f"shape mismatch: {f.shape} vs {g.shape}")
    n_g = np.asarray(times).size
    if f.size % n_g != 0:
        raise ValueError(f"stacked length {f.size} not a multiple of grid size {n_g}")
    p = f.size // n_g
    w = np.tile(trapezoid_weights(times), p)
    return float(np.sum(f * w * g))


def h_norm(f: np.ndarray, times: np.ndarray) -> float:
    return float(np.sqrt(h_inner(f, f, times)))


@dataclass
class OrthonormalizedFit:
    """Mean, orthonormal eigenfunctions, uncorrelated scores, and spectrum."""

    grid_times: np.ndarray            # (n_g,)
    mean: np.ndarray                  # (p, n_g)
    eigenfunctions: np.ndarray        # (p * n_g, L) stacked per variable
    scores: np.ndarray                # (n, L)
    eigenvalues: np.ndarray           # (L,) non-increasing
    pve: np.ndarray                   # (L,) sums to one
    score_cov: np.ndarray             # (n, L, L) transported posterior covariances
    near_zero: np.ndarray             # (L,) bool, spectrum entries at the floor
    engine: str
    variable_names: tuple[str, ...]
    subject_ids: tuple[str, ...]
    raw: RawFit | None = None

    @property
    def num_components(self) -> int:
        return self.eigenfunctions.shape[1]

    @property
    def p(self) -> int:
        return self.mean.shape[0]

    def eigenfunction(self, l: int, j: int | None = None) -> np.ndarray:
        """Component l, either the full stacked vector or one variable's block."""
        col = self.eigenfunctions[:, l]
        if j is None:
            return col
        n_g = self.grid_times.size
        return col[j * n_g:(j + 1) * n_g]

    def reconstruct(self, i: int) -> np.ndarray:
        """Posterior-mean trajectory of subject i on the grid, shape (p, n_g)."""
        flat = self.mean.reshape(-1) + self.eigenfunctions @ self.scores[i]
        return flat.reshape(self.p, self.grid_times.size)


def orthonormalize(raw: RawFit, grid_size: int = 1000) -> OrthonormalizedFit:
    """Turn a raw fit into the orthonormal decomposition, signs aligned."""
    state = raw.state
    L = state.num_components
    p = state.p
    n = state.n
    if n < 2:
        raise ValueError("orthonormalization needs at least two subjects")

    grids = [evaluation_grid(b, grid_size) for b in raw.bases]
    times = grids[0].times
    mean_rows = []
    psi_blocks = []
    for j in range(p):
        m = raw.bases[j].num_columns
        e_nu, _, e_v = nu_moments(state.nu[j], L, m, label=f"nu^({j})")
        cg = grids[j].design
        mean_rows.append(cg @ e_v[:, 0])
        psi_blocks.append(cg @ e_v[:, 1:])          # (n_g, L)
    mean = np.vstack(mean_rows)
    psi = np.vstack(psi_blocks)                     # (p * n_g, L)

    w = np.tile(trapezoid_weights(times), p)
    sqrt_w = np.sqrt(w)
    u_w, sing, vt = np.linalg.svd(sqrt_w[:, None] * psi, full_matrices=False)
    u = u_w / sqrt_w[:, None]                       # columns orthonormal in H
    v = vt.T

    xi_mean, xi_cov = zeta_moments(state.zeta, L)
    m_mat = xi_mean @ v @ np.diag(sing)             # (n, L)
    c_zeta = np.atleast_2d(np.cov(m_mat, rowvar=False, ddof=1))
    eigval, eigvec = np.linalg.eigh(c_zeta)
    order = np.argsort(eigval)[::-1]
    lam = eigval[order]
    q = eigvec[:, order]
    near_zero = lam <= NEAR_ZERO_EIGENVALUE
    lam_safe = np.maximum(lam, EIGENVALUE_FLOOR)

    psi_dot = (u @ q) * np.sqrt(lam_safe)[None, :]
    norms = np.array([h_norm(psi_dot[:, l], times) for l in range(L)])
    norms = np.maximum(norms, np.sqrt(EIGENVALUE_FLOOR))
    psi_hat = psi_dot / norms[None, :]
    scale = norms / np.sqrt(lam_safe)               # ~1; maps whitened to reported scores
    zeta_hat = (m_mat @ q) * scale[None, :]

    # Linear map from raw scores to reported scores, for covariance transport.
    lin = v @ np.diag(sing) @ q * scale[None, :]
    score_cov = np.einsum("ab,nbc,cd->nad", lin.T, xi_cov, lin)

    eigenvalues = np.var(zeta_hat, axis=0, ddof=1)
    order2 = np.argsort(-eigenvalues, kind="stable")
    eigenvalues = eigenvalues[order2]
    psi_hat = psi_hat[:, order2]
    zeta_hat = zeta_hat[:, order2]
    near_zero = near_zero[order2]
    score_cov = score_cov[:, order2][:, :, order2]

    total = eigenvalues.sum()
    pve_values = eigenvalues / total if total > 0 else np.zeros(L)

    fit = OrthonormalizedFit(
        grid_times=times, mean=mean, eigenfunctions=psi_hat, scores=zeta_hat,
        eigenvalues=eigenvalues, pve=pve_values, score_cov=score_cov,
        near_zero=near_zero, engine=raw.engine,
        variable_names=raw.variable_names, subject_ids=raw.subject_ids, raw=raw)
    return align_signs(fit)


def align_signs(fit: OrthonormalizedFit) -> OrthonormalizedFit:
    """Flip each component so its largest-magnitude grid value is positive.

    Eigenfunction and score columns flip together, so reconstructions are
    unchanged; ties break to the earliest grid index.
    """
    flips = np.ones(fit.num_components)
    for l in range(fit.num_components):
        col = fit.eigenfunctions[:, l]
        if col[np.argmax(np.abs(col))] < 0:
            flips[l] = -1.0
    eig = fit.eigenfunctions * flips[None, :]
    scores = fit.scores * flips[None, :]
    score_cov = fit.score_cov * flips[None, :, None] * flips[None, None, :]
    return replace(fit, eigenfunctions=eig, scores=scores, score_cov=score_cov)


def pve(fit: OrthonormalizedFit) -> np.ndarray:
    """Normalized eigenvalue shares; raises for an all-zero spectrum."""
    total = fit.eigenvalues.sum()
    if total <= 0:
        raise ValueError("degenerate fit: all score variances are zero")
    return fit.eigenvalues / total


@dataclass
class PredictedTrajectory:
    times: np.ndarray
    estimate: np.ndarray   # (p, n_g)
    lower: np.ndarray      # (p, n_g)
    upper: np.ndarray      # (p, n_g)


def predict_trajectory(fit: OrthonormalizedFit, subject: int,
                       grid_size: int | None = None,
                       num_samples: int = 1000) -> PredictedTrajectory:
    """Posterior-mean trajectory with 95% pointwise bands for one subject.

    Bands come from joint draws of the spline coefficients and the subject's
    scores under the fitted variational densities, pushed through the
    reconstruction; the sampling stream is derived from the fit seed and the
    subject index.
    """
    raw = fit.raw
    if raw is None:
        raise ValueError("prediction requires the raw fit attached")
    state = raw.state
    L = state.num_components
    if not 0 <= subject < state.n:
        raise IndexError(f"subject index {subject} out of range")
    if grid_size is None:
        grids = [evaluation_grid(b, fit.grid_times.size) for b in raw.bases]
    else:
        grids = [evaluation_grid(b, grid_size) for b in raw.bases]
    times = grids[0].times

    rng = np.random.default_rng([raw.hyper.seed, subject])
    z_mean, z_cov = zeta_moments([state.zeta[subject]], L)
    z_draw = rng.multivariate_normal(z_mean[0], z_cov[0], size=num_samples,
                                     method="cholesky")
    zt = np.concatenate([np.ones((num_samples, 1)), z_draw], axis=1)

    est_rows, lo_rows, hi_rows = [], [], []
    for j in range(state.p):
        m = raw.bases[j].num_columns
        e_nu, cov_nu, e_v = nu_moments(state.nu[j], L, m, label=f"nu^({j})")
        chol = np.linalg.cholesky(cov_nu + 1e-12 * np.trace(cov_nu) / cov_nu.shape[0]
                                  * np.eye(cov_nu.shape[0]))
        nu_draw = e_nu[None, :] + rng.standard_normal((num_samples, e_nu.size)) @ chol.T
        v_draw = nu_draw.reshape(num_samples, L + 1, m)
        coef = np.einsum("sum,su->sm", v_draw, zt)
        curves = coef @ grids[j].design.T
        est_rows.append(grids[j].design @ (e_v @ np.concatenate([[1.0], z_mean[0]])))
        lo_rows.append(np.percentile(curves, 2.5, axis=0))
        hi_rows.append(np.percentile(curves, 97.5, axis=0))
    return PredictedTrajectory(times=times, estimate=np.vstack(est_rows),
                               lower=np.vstack(lo_rows), upper=np.vstack(hi_rows))


# ---------------------------------------------------------------------------
# Exports


def write_function_csv(fit: OrthonormalizedFit, path) -> None:
    """Grid table (variable, t, mean, psi_1..psi_L), 17 significant digits."""
    L = fit.num_components
    n_g = fit.grid_times.size
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variable", "t", "mean"] + [f"psi_{l + 1}" for l in range(L)])
        for j, name in enumerate(fit.variable_names):
            block = fit.eigenfunctions[j * n_g:(j + 1) * n_g]
            for g in range(n_g):
                row = [name, f"{fit.grid_times[g]:.17g}", f"{fit.mean[j, g]:.17g}"]
                row += [f"{block[g, l]:.17g}" for l in range(L)]
                writer.writerow(row)


def write_scores_csv(fit: OrthonormalizedFit, path) -> None:
    """Subject table (subject, zeta_1..L, sd_1..L)."""
    L = fit.num_components
    sds = np.sqrt(np.maximum(np.einsum("nll->nl", fit.score_cov), 0.0))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject"] + [f"zeta_{l + 1}" for l in range(L)]
                        + [f"sd_{l + 1}" for l in range(L)])
        for i, sid in enumerate(fit.subject_ids):
            row = [sid] + [f"{fit.scores[i, l]:.17g}" for l in range(L)]
            row += [f"{sds[i, l]:.17g}" for l in range(L)]
            writer.writerow(row)
