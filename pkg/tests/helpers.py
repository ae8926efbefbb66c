"""Shared builders for hand-crafted model instances and independent oracles."""

import numpy as np

from mfpca.engines import RawFit
from mfpca.expfam import gauss_to_natural, invchisq_to_natural
from mfpca.model import (Hyperparameters, ModelDesign, MomentCache,
                         VariationalState)
from mfpca.postprocess import trapezoid_weights
from mfpca.splines import build_basis


class StubBasis:
    """Stands in for a spline basis when tests supply raw design matrices."""

    def __init__(self, num_columns):
        self.num_columns = num_columns
        self.num_splines = num_columns - 2


def design_from_matrices(c_lists, x_lists) -> ModelDesign:
    """Build a ModelDesign from explicit per-(subject, variable) matrices.

    c_lists[j][i] is the design matrix of subject i on variable j;
    x_lists[j][i] the matching observation vector.
    """
    p = len(c_lists)
    n = len(c_lists[0])
    counts = np.zeros((n, p), dtype=int)
    ctc, ctx, xtx, pooled_c, pooled_x = [], [], [], [], []
    for j in range(p):
        m = c_lists[j][0].shape[1]
        ctc_j = np.zeros((n, m, m))
        ctx_j = np.zeros((n, m))
        xtx_j = np.zeros(n)
        for i in range(n):
            c = np.asarray(c_lists[j][i], dtype=float)
            x = np.asarray(x_lists[j][i], dtype=float)
            counts[i, j] = x.size
            ctc_j[i] = c.T @ c
            ctx_j[i] = c.T @ x
            xtx_j[i] = float(x @ x)
        ctc.append(ctc_j)
        ctx.append(ctx_j)
        xtx.append(xtx_j)
        pooled_c.append(np.vstack(c_lists[j]))
        pooled_x.append(np.concatenate(x_lists[j]))
    bases = [StubBasis(c_lists[j][0].shape[1]) for j in range(p)]
    return ModelDesign(bases=bases, counts=counts, ctc=ctc, ctx=ctx, xtx=xtx,
                       pooled_design=pooled_c, pooled_values=pooled_x)


def cache_from_moments(design, L, e_nu, cov_nu, e_zeta, cov_zeta,
                       e_recip_sigma_eps) -> MomentCache:
    """MomentCache with explicit Gaussian moments; scalars default to one."""
    p = design.p
    n = e_zeta.shape[0]
    e_V = []
    for j in range(p):
        m = design.num_cols(j)
        e_V.append(np.asarray(e_nu[j]).reshape(L + 1, m).T)
    e_zt = np.concatenate([np.ones((n, 1)), e_zeta], axis=1)
    cov_zt = np.zeros((n, L + 1, L + 1))
    cov_zt[:, 1:, 1:] = cov_zeta
    ones_p = np.ones(p)
    zeros_p = np.zeros(p)
    cache = MomentCache(
        L=L,
        e_nu=[np.asarray(v, dtype=float) for v in e_nu],
        cov_nu=[np.asarray(c, dtype=float) for c in cov_nu],
        e_V=e_V,
        e_zeta=np.asarray(e_zeta, dtype=float),
        cov_zeta=np.asarray(cov_zeta, dtype=float),
        e_zt=e_zt,
        e_ztzt=cov_zt + np.einsum("nu,nv->nuv", e_zt, e_zt),
        e_recip_sigma_eps=np.asarray(e_recip_sigma_eps, dtype=float),
        e_log_sigma_eps=zeros_p.copy(),
        e_recip_a_eps=ones_p.copy(), e_log_a_eps=zeros_p.copy(),
        e_recip_sigma_mu=ones_p.copy(), e_log_sigma_mu=zeros_p.copy(),
        e_recip_a_mu=ones_p.copy(), e_log_a_mu=zeros_p.copy(),
        e_recip_sigma_psi=np.ones((p, L)), e_log_sigma_psi=np.zeros((p, L)),
        e_recip_a_psi=np.ones((p, L)), e_log_a_psi=np.zeros((p, L)),
        e_H=[None] * p,
    )
    for j in range(p):
        cache._update_e_H(j, design)
    return cache


def raw_fit_from_moments(bases, nu_means, nu_covs, zeta_means, zeta_covs,
                         seed=0, engine="mfvb") -> RawFit:
    """RawFit wrapping prescribed q-density moments (for postprocess tests)."""
    p = len(bases)
    n = zeta_means.shape[0]
    L = zeta_means.shape[1]
    nu = [gauss_to_natural(nu_means[j], nu_covs[j], "vec") for j in range(p)]
    zeta = [gauss_to_natural(zeta_means[i], zeta_covs[i], "vech") for i in range(n)]

    def ic():
        return invchisq_to_natural(2.0, 2.0)

    state = VariationalState(
        num_components=L, nu=nu, zeta=zeta,
        sigma_eps=[ic() for _ in range(p)], a_eps=[ic() for _ in range(p)],
        sigma_mu=[ic() for _ in range(p)], a_mu=[ic() for _ in range(p)],
        sigma_psi=[[ic() for _ in range(L)] for _ in range(p)],
        a_psi=[[ic() for _ in range(L)] for _ in range(p)],
        elbo_trace=[0.0], iteration=1)
    return RawFit(engine=engine,
                  hyper=Hyperparameters(num_components=L, seed=seed),
                  bases=list(bases), state=state, elbo_trace=[0.0], converged=True,
                  iterations=1, dataset_fingerprint="synthetic",
                  variable_names=tuple(f"v{j + 1}" for j in range(p)),
                  subject_ids=tuple(f"s{i + 1}" for i in range(n)))


def random_raw_fit(rng, p=2, L=2, K=6, n=40, score_scales=(2.0, 1.0),
                   coef_scale=1.0):
    """Random well-separated raw decomposition for orthonormalization tests."""
    bases = [build_basis(K) for _ in range(p)]
    m = K + 2
    d = (L + 1) * m
    nu_means, nu_covs = [], []
    for _ in range(p):
        nu_means.append(coef_scale * rng.normal(size=d))
        a = rng.normal(size=(d, d)) / np.sqrt(d)
        nu_covs.append(0.01 * (a @ a.T + np.eye(d)))
    zeta_means = rng.normal(size=(n, L)) * np.asarray(score_scales)[None, :L]
    zeta_covs = np.zeros((n, L, L))
    for i in range(n):
        a = rng.normal(size=(L, L))
        zeta_covs[i] = 0.05 * (a @ a.T + np.eye(L))
    return raw_fit_from_moments(bases, nu_means, nu_covs, zeta_means, zeta_covs)


def weighted_pca_oracle(curves, times, p, num_components):
    """Brute-force PCA of stacked curves under the trapezoid-weighted metric.

    curves: (n, p * n_g) reconstructed trajectories.  Returns (eigenfunctions
    (p*n_g, L) unit-norm in H, eigenvalues, centered scores (n, L)).
    """
    n = curves.shape[0]
    w = np.tile(trapezoid_weights(times), p)
    centered = curves - curves.mean(axis=0, keepdims=True)
    y = centered * np.sqrt(w)[None, :]
    gram = y @ y.T / (n - 1)
    eigval, eigvec = np.linalg.eigh(gram)
    order = np.argsort(eigval)[::-1][:num_components]
    lam = eigval[order]
    funcs = np.zeros((curves.shape[1], len(order)))
    scores = np.zeros((n, len(order)))
    for idx, k in enumerate(order):
        direction = centered.T @ eigvec[:, k]
        norm = np.sqrt(direction @ (w * direction))
        funcs[:, idx] = direction / norm
        scores[:, idx] = centered @ (w * funcs[:, idx])
    return funcs, lam, scores
