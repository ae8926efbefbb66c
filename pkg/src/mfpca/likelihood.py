"""Gaussian likelihood fragment for the shared-score functional factor model.

Emits the three natural-parameter message families: to each per-variable
spline-coefficient block, to each subject's score vector, and to each
residual variance.  Kronecker products are accumulated blockwise, never
materialized per subject at full size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import expfam
from .expfam import GaussianNatural, InvChiSqNatural
from .model import ModelDesign, MomentCache, VariationalState, refresh_moments


@dataclass
class FragmentMessages:
    """All outgoing likelihood-fragment messages for one pass."""

    to_nu: list[GaussianNatural]          # per variable, vec form
    to_zeta: list[GaussianNatural]        # per subject, vech form
    to_sigma_eps: list[InvChiSqNatural]   # per variable


def message_to_nu(cache: MomentCache, design: ModelDesign, j: int) -> GaussianNatural:
    """Likelihood message to the spline-coefficient block of variable j."""
    m = design.num_cols(j)
    L = cache.L
    w = cache.e_recip_sigma_eps[j]
    linear = np.einsum("nu,na->ua", cache.e_zt, design.ctx[j])       # (L+1, m)
    eta1 = w * linear.reshape(-1)
    quad = np.einsum("nuv,nab->uavb", cache.e_ztzt, design.ctc[j])
    d = (L + 1) * m
    eta2 = -0.5 * w * expfam.vec(quad.reshape(d, d))
    return GaussianNatural(eta1, eta2, "vec")


def messages_to_zeta(cache: MomentCache, design: ModelDesign) -> tuple[np.ndarray, np.ndarray]:
    """Likelihood messages to all score vectors, batched.

    Returns stacked natural blocks: eta1 of shape (n, L) and eta2 of shape
    (n, L(L+1)/2) in vech form.
    """
    n, L = design.n, cache.L
    eta1 = np.zeros((n, L))
    h_full = np.zeros((n, L, L))
    for j in range(design.p):
        w = cache.e_recip_sigma_eps[j]
        proj = np.einsum("al,na->nl", cache.e_V_psi[j], design.ctx[j])
        eta1 += w * (proj - cache.e_h_mu_psi(j))
        h_full += w * cache.e_H_psi(j)
    dl = expfam.duplication(L)
    eta2 = -0.5 * h_full.reshape(n, L * L) @ dl
    return eta1, eta2


def message_to_zeta(cache: MomentCache, design: ModelDesign, i: int) -> GaussianNatural:
    """Likelihood message to the score vector of subject i."""
    eta1, eta2 = messages_to_zeta(cache, design)
    return GaussianNatural(eta1[i], eta2[i], "vech")


def expected_residual_ss(cache: MomentCache, design: ModelDesign, j: int) -> np.ndarray:
    """Per-subject E||x_i - C_i V zt_i||^2 for variable j.

    The exact expectation is nonnegative; the clamp removes cancellation
    error on (near-)perfect fits.
    """
    cross = np.einsum("na,au,nu->n", design.ctx[j], cache.e_V[j], cache.e_zt)
    trace = np.einsum("nuv,nuv->n", cache.e_ztzt, cache.e_H[j])
    return np.maximum(design.xtx[j] - 2.0 * cross + trace, 0.0)


def message_to_sigma_eps(cache: MomentCache, design: ModelDesign, j: int) -> InvChiSqNatural:
    """Likelihood message to the residual variance of variable j."""
    total_count = float(design.counts[:, j].sum())
    total_ss = float(expected_residual_ss(cache, design, j).sum())
    return InvChiSqNatural(-0.5 * total_count, -0.5 * total_ss)


def run_fragment(state: VariationalState, design: ModelDesign,
                 cache: MomentCache | None = None) -> FragmentMessages:
    """Refresh the moment cache once, then emit every message of the fragment."""
    if cache is None:
        cache = refresh_moments(state, design)
    to_nu = [message_to_nu(cache, design, j) for j in range(design.p)]
    to_sigma = [message_to_sigma_eps(cache, design, j) for j in range(design.p)]
    z1, z2 = messages_to_zeta(cache, design)
    to_zeta = [GaussianNatural(z1[i], z2[i], "vech") for i in range(design.n)]
    return FragmentMessages(to_nu=to_nu, to_zeta=to_zeta, to_sigma_eps=to_sigma)
