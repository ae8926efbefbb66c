"""Bayesian model specification: hyperparameters, prior natural parameters,
the variational state for the mean-field factorization, and its derived
moment cache.

The factorization keeps one Gaussian block q(nu_j) per variable (spline
coefficients of the mean and all latent functions, vec form), one Gaussian
block q(zeta_i) per subject (scores, vech form), and inverse chi-squared
blocks for every variance and auxiliary half-Cauchy parameter.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import expfam
from .dataset import FunctionalDataset
from .errors import ConfigurationError, NumericalError
from .expfam import GaussianNatural, InvChiSqNatural
from .splines import SplineBasis, design_matrix

logger = logging.getLogger(__name__)

INIT_COV_SCALE = 0.1
INIT_PSI_SD = 0.1
INIT_RIDGE = 1e-6
INIT_INVCHISQ = (2.0, 2.0)  # (shape, scale)


@dataclass(frozen=True)
class Hyperparameters:
    """Fixed model and optimizer settings.

    sigma_beta is the prior s.d. of the unpenalized intercept/slope
    coefficients; half_cauchy_scale is the scale of the half-Cauchy priors on
    all standard deviations, realized through iterated inverse chi-squared
    auxiliaries.
    """

    num_components: int
    num_splines: int | None = None
    sigma_beta: float = 1e5
    half_cauchy_scale: float = 1e5
    tol: float = 1e-5
    max_iter: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.num_components < 1:
            raise ConfigurationError("num_components must be >= 1")
        if self.sigma_beta <= 0 or self.half_cauchy_scale <= 0:
            raise ConfigurationError("sigma_beta and half_cauchy_scale must be positive")
        if self.tol <= 0:
            raise ConfigurationError("tol must be positive")
        if self.max_iter < 1:
            raise ConfigurationError("max_iter must be >= 1")

    def to_dict(self) -> dict:
        return {
            "num_components": self.num_components,
            "num_splines": self.num_splines,
            "sigma_beta": self.sigma_beta,
            "half_cauchy_scale": self.half_cauchy_scale,
            "tol": self.tol,
            "max_iter": self.max_iter,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparameters":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class ModelDesign:
    """Static per-(subject, variable) design quantities, precomputed once."""

    bases: list[SplineBasis]
    counts: np.ndarray                 # (n, p)
    ctc: list[np.ndarray]              # per j: (n, m_j, m_j), m_j = K_j + 2
    ctx: list[np.ndarray]              # per j: (n, m_j)
    xtx: list[np.ndarray]              # per j: (n,)
    pooled_design: list[np.ndarray]    # per j: (sum_i n_ij, m_j)
    pooled_values: list[np.ndarray]    # per j: (sum_i n_ij,)

    @property
    def n(self) -> int:
        return self.counts.shape[0]

    @property
    def p(self) -> int:
        return self.counts.shape[1]

    def num_cols(self, j: int) -> int:
        return self.bases[j].num_columns


def build_design(dataset: FunctionalDataset, bases: list[SplineBasis]) -> ModelDesign:
    """Evaluate all design matrices and their cross-products."""
    if len(bases) != dataset.p:
        raise ConfigurationError(
            f"expected {dataset.p} bases (one per variable), got {len(bases)}")
    n, p = dataset.n, dataset.p
    counts = np.zeros((n, p), dtype=int)
    ctc, ctx, xtx, pooled_c, pooled_x = [], [], [], [], []
    for j in range(p):
        m = bases[j].num_columns
        ctc_j = np.zeros((n, m, m))
        ctx_j = np.zeros((n, m))
        xtx_j = np.zeros(n)
        rows, vals = [], []
        for i in range(n):
            c = design_matrix(bases[j], dataset.times[i][j])
            x = dataset.values[i][j]
            counts[i, j] = x.size
            ctc_j[i] = c.T @ c
            ctx_j[i] = c.T @ x
            xtx_j[i] = float(x @ x)
            rows.append(c)
            vals.append(x)
        ctc.append(ctc_j)
        ctx.append(ctx_j)
        xtx.append(xtx_j)
        pooled_c.append(np.vstack(rows) if rows else np.zeros((0, m)))
        pooled_x.append(np.concatenate(vals) if vals else np.zeros(0))
    return ModelDesign(bases=list(bases), counts=counts, ctc=ctc, ctx=ctx, xtx=xtx,
                       pooled_design=pooled_c, pooled_values=pooled_x)


# ---------------------------------------------------------------------------
# Prior and conjugate-update natural parameters


def zeta_prior_natural(L: int) -> GaussianNatural:
    """Standard-normal score prior N(0, I_L) in vech natural form."""
    eta2 = -0.5 * (expfam.duplication(L).T @ expfam.vec(np.eye(L)))
    return GaussianNatural(np.zeros(L), eta2, "vech")


def a_prior_natural(half_cauchy_scale: float) -> InvChiSqNatural:
    """Inverse chi-squared (1, 1/A^2) prior on an auxiliary variable."""
    return InvChiSqNatural(-1.5, -0.5 / half_cauchy_scale**2)


def iterated_to_sigma_natural(e_recip_a: float) -> InvChiSqNatural:
    """Message from the sigma^2 | a factor toward sigma^2."""
    return InvChiSqNatural(-1.5, -0.5 * e_recip_a)


def iterated_to_a_natural(e_recip_sigma: float) -> InvChiSqNatural:
    """Message from the sigma^2 | a factor toward a."""
    return InvChiSqNatural(-0.5, -0.5 * e_recip_sigma)


def variance_conjugate_natural(count: float, e_sum_sq: float,
                               e_recip_a: float) -> InvChiSqNatural:
    """Optimal q(sigma^2): shape = count + 1, scale = E(sum of squares) + E(1/a)."""
    return InvChiSqNatural(-0.5 * (count + 3.0), -0.5 * (e_sum_sq + e_recip_a))


def aux_conjugate_natural(e_recip_sigma: float, half_cauchy_scale: float) -> InvChiSqNatural:
    """Optimal q(a): shape 2, scale E(1/sigma^2) + 1/A^2."""
    return InvChiSqNatural(-2.0, -0.5 * (e_recip_sigma + half_cauchy_scale**-2))


def penalization_precision_diag(K: int, L: int, sigma_beta: float,
                                e_recip_mu: float, e_recip_psi: np.ndarray) -> np.ndarray:
    """Diagonal of the expected prior precision of nu_j.

    Block order [mu, psi_1, ..., psi_L]; within each block the two
    intercept/slope entries carry 1/sigma_beta^2 and the K penalized entries
    the expected reciprocal variance.
    """
    sb = sigma_beta**-2
    blocks = [np.concatenate([[sb, sb], np.full(K, e_recip_mu)])]
    for l in range(L):
        blocks.append(np.concatenate([[sb, sb], np.full(K, e_recip_psi[l])]))
    return np.concatenate(blocks)


def penalization_natural(K: int, L: int, sigma_beta: float, e_recip_mu: float,
                         e_recip_psi: np.ndarray) -> GaussianNatural:
    """Gaussian penalization message to nu_j in vec natural form."""
    diag = penalization_precision_diag(K, L, sigma_beta, e_recip_mu, e_recip_psi)
    return GaussianNatural(np.zeros(diag.size), -0.5 * expfam.vec(np.diag(diag)), "vec")


# ---------------------------------------------------------------------------
# Variational state


@dataclass
class VariationalState:
    """Natural parameters of every q-density, plus the ELBO trace."""

    num_components: int
    nu: list[GaussianNatural]               # per j, vec form
    zeta: list[GaussianNatural]              # per i, vech form
    sigma_eps: list[InvChiSqNatural]         # per j
    a_eps: list[InvChiSqNatural]
    sigma_mu: list[InvChiSqNatural]
    a_mu: list[InvChiSqNatural]
    sigma_psi: list[list[InvChiSqNatural]]   # [j][l]
    a_psi: list[list[InvChiSqNatural]]
    elbo_trace: list[float] = field(default_factory=list)
    iteration: int = 0

    @property
    def n(self) -> int:
        return len(self.zeta)

    @property
    def p(self) -> int:
        return len(self.nu)


def initialize_state(design: ModelDesign, hyper: Hyperparameters) -> VariationalState:
    """Deterministic, seeded initialization.

    The mean-function block starts at a ridge-penalized least-squares fit of
    the pooled per-variable data; latent-function blocks start at small
    seeded Gaussian draws to break rotational symmetry; scores start at their
    prior.
    """
    L = hyper.num_components
    rng = np.random.default_rng(hyper.seed)
    nu = []
    for j in range(design.p):
        m = design.num_cols(j)
        cp, xp = design.pooled_design[j], design.pooled_values[j]
        if cp.shape[0] >= m:
            beta = np.linalg.solve(cp.T @ cp + INIT_RIDGE * np.eye(m), cp.T @ xp)
        else:
            warnings.warn(
                f"variable {j}: pooled observations ({cp.shape[0]}) fewer than "
                f"design columns ({m}); falling back to zero-mean initialization")
            beta = np.zeros(m)
        psi_means = rng.normal(0.0, INIT_PSI_SD, size=(L, m))
        mean = np.concatenate([beta, psi_means.ravel()])
        nu.append(expfam.gauss_to_natural(mean, INIT_COV_SCALE * np.eye(mean.size), "vec"))

    zeta_prior = zeta_prior_natural(L)
    zeta = [GaussianNatural(zeta_prior.eta1.copy(), zeta_prior.eta2.copy(), "vech")
            for _ in range(design.n)]

    def ic():
        return expfam.invchisq_to_natural(*INIT_INVCHISQ)

    return VariationalState(
        num_components=L,
        nu=nu,
        zeta=zeta,
        sigma_eps=[ic() for _ in range(design.p)],
        a_eps=[ic() for _ in range(design.p)],
        sigma_mu=[ic() for _ in range(design.p)],
        a_mu=[ic() for _ in range(design.p)],
        sigma_psi=[[ic() for _ in range(L)] for _ in range(design.p)],
        a_psi=[[ic() for _ in range(L)] for _ in range(design.p)],
    )


# ---------------------------------------------------------------------------
# Moments


def nu_moments(nat: GaussianNatural, L: int, m: int, label: str = "nu"):
    """Mean, covariance, and (m, L+1) column matrix E(V) for one q(nu_j)."""
    try:
        mean, cov = expfam.gauss_from_natural(nat)
    except NumericalError as exc:
        raise NumericalError(f"improper q({label}): {exc}") from exc
    e_v = mean.reshape(L + 1, m).T  # columns mu, psi_1..psi_L
    return mean, cov, e_v


def zeta_moments(naturals: list[GaussianNatural], L: int):
    """Batched inverse map for all q(zeta_i): means (n, L), covariances (n, L, L)."""
    n = len(naturals)
    if n == 0:
        return np.zeros((0, L)), np.zeros((0, L, L))
    eta1 = np.stack([nat.eta1 for nat in naturals])
    eta2 = np.stack([nat.eta2 for nat in naturals])
    dp = expfam.duplication_pinv(L)
    prec = -2.0 * (eta2 @ dp).reshape(n, L, L)
    prec = 0.5 * (prec + prec.transpose(0, 2, 1))
    try:
        cov = np.linalg.inv(prec)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("improper q(zeta): singular precision") from exc
    eig = np.linalg.eigvalsh(prec)
    if not np.all(eig > 0):
        bad = int(np.argmin(eig.min(axis=1)))
        raise NumericalError(f"improper q(zeta_{bad}): precision not positive definite")
    cov = 0.5 * (cov + cov.transpose(0, 2, 1))
    mean = np.einsum("nab,nb->na", cov, eta1)
    return mean, cov


@dataclass
class MomentCache:
    """Derived q-density moments; an immutable snapshot once fully refreshed."""

    L: int
    # per-variable Gaussian moments
    e_nu: list[np.ndarray]
    cov_nu: list[np.ndarray]
    e_V: list[np.ndarray]            # (m_j, L+1), columns mu then psi_l
    # score moments
    e_zeta: np.ndarray               # (n, L)
    cov_zeta: np.ndarray             # (n, L, L)
    e_zt: np.ndarray                 # (n, L+1), leading entry 1
    e_ztzt: np.ndarray               # (n, L+1, L+1)
    # inverse chi-squared moments
    e_recip_sigma_eps: np.ndarray
    e_log_sigma_eps: np.ndarray
    e_recip_a_eps: np.ndarray
    e_log_a_eps: np.ndarray
    e_recip_sigma_mu: np.ndarray
    e_log_sigma_mu: np.ndarray
    e_recip_a_mu: np.ndarray
    e_log_a_mu: np.ndarray
    e_recip_sigma_psi: np.ndarray    # (p, L)
    e_log_sigma_psi: np.ndarray
    e_recip_a_psi: np.ndarray
    e_log_a_psi: np.ndarray
    # expected quadratic forms E(H_i^{(j)}), shape per j: (n, L+1, L+1)
    e_H: list[np.ndarray]

    @property
    def e_V_psi(self) -> list[np.ndarray]:
        return [v[:, 1:] for v in self.e_V]

    def e_h_mu_psi(self, j: int) -> np.ndarray:
        """(n, L) vectors with the mean/latent cross quadratic forms."""
        return self.e_H[j][:, 1:, 0]

    def e_H_psi(self, j: int) -> np.ndarray:
        """(n, L, L) latent-only quadratic forms."""
        return self.e_H[j][:, 1:, 1:]

    def e_h_mu(self, j: int) -> np.ndarray:
        return self.e_H[j][:, 0, 0]

    def update_nu(self, j: int, state: VariationalState, design: ModelDesign) -> None:
        m = design.num_cols(j)
        mean, cov, e_v = nu_moments(state.nu[j], self.L, m, label=f"nu^({j})")
        self.e_nu[j] = mean
        self.cov_nu[j] = cov
        self.e_V[j] = e_v
        self._update_e_H(j, design)

    def _update_e_H(self, j: int, design: ModelDesign) -> None:
        m = design.num_cols(j)
        cov4 = self.cov_nu[j].reshape(self.L + 1, m, self.L + 1, m)
        ctc = design.ctc[j]
        point = np.einsum("au,nab,bv->nuv", self.e_V[j], ctc, self.e_V[j])
        trace = np.einsum("uavb,nab->nuv", cov4, ctc)
        self.e_H[j] = point + trace

    def update_zeta(self, state: VariationalState) -> None:
        mean, cov = zeta_moments(state.zeta, self.L)
        n = mean.shape[0]
        self.e_zeta = mean
        self.cov_zeta = cov
        e_zt = np.concatenate([np.ones((n, 1)), mean], axis=1)
        cov_zt = np.zeros((n, self.L + 1, self.L + 1))
        cov_zt[:, 1:, 1:] = cov
        self.e_zt = e_zt
        self.e_ztzt = cov_zt + np.einsum("nu,nv->nuv", e_zt, e_zt)

    def update_scalars(self, state: VariationalState) -> None:
        def moments(nats, label):
            recip, logm = [], []
            for idx, nat in enumerate(nats):
                if not nat.is_proper():
                    raise NumericalError(f"improper q({label}_{idx})")
                recip.append(expfam.invchisq_mean_reciprocal(nat))
                logm.append(expfam.invchisq_mean_log(nat))
            return np.array(recip), np.array(logm)

        self.e_recip_sigma_eps, self.e_log_sigma_eps = moments(state.sigma_eps, "sigma_eps")
        self.e_recip_a_eps, self.e_log_a_eps = moments(state.a_eps, "a_eps")
        self.e_recip_sigma_mu, self.e_log_sigma_mu = moments(state.sigma_mu, "sigma_mu")
        self.e_recip_a_mu, self.e_log_a_mu = moments(state.a_mu, "a_mu")
        rs, ls, ra, la = [], [], [], []
        for j in range(len(state.sigma_psi)):
            r1, l1 = moments(state.sigma_psi[j], f"sigma_psi^({j})")
            r2, l2 = moments(state.a_psi[j], f"a_psi^({j})")
            rs.append(r1)
            ls.append(l1)
            ra.append(r2)
            la.append(l2)
        self.e_recip_sigma_psi = np.array(rs).reshape(len(rs), self.L)
        self.e_log_sigma_psi = np.array(ls).reshape(len(ls), self.L)
        self.e_recip_a_psi = np.array(ra).reshape(len(ra), self.L)
        self.e_log_a_psi = np.array(la).reshape(len(la), self.L)


def refresh_moments(state: VariationalState, design: ModelDesign) -> MomentCache:
    """Compute every cache field from the current state."""
    L = state.num_components
    p = state.p
    cache = MomentCache(
        L=L,
        e_nu=[None] * p, cov_nu=[None] * p, e_V=[None] * p,
        e_zeta=None, cov_zeta=None, e_zt=None, e_ztzt=None,
        e_recip_sigma_eps=None, e_log_sigma_eps=None,
        e_recip_a_eps=None, e_log_a_eps=None,
        e_recip_sigma_mu=None, e_log_sigma_mu=None,
        e_recip_a_mu=None, e_log_a_mu=None,
        e_recip_sigma_psi=None, e_log_sigma_psi=None,
        e_recip_a_psi=None, e_log_a_psi=None,
        e_H=[None] * p,
    )
    cache.update_zeta(state)
    cache.update_scalars(state)
    for j in range(p):
        cache.update_nu(j, state, design)
    return cache


def penalized_sum_squares(cache: MomentCache, j: int, K: int, block: int) -> float:
    """E ||u||^2 over the K penalized coefficients of block ``block`` of nu_j.

    Block 0 is the mean function, block l >= 1 the l-th latent function.
    """
    m = K + 2
    sl = slice(block * m + 2, (block + 1) * m)
    mean = cache.e_nu[j][sl]
    return float(mean @ mean + np.trace(cache.cov_nu[j][sl, sl]))


def unpenalized_sum_squares(cache: MomentCache, j: int, K: int) -> float:
    """E of the squared norm of all intercept/slope coefficients of nu_j."""
    m = K + 2
    total = 0.0
    for block in range(cache.L + 1):
        sl = slice(block * m, block * m + 2)
        mean = cache.e_nu[j][sl]
        total += float(mean @ mean + np.trace(cache.cov_nu[j][sl, sl]))
    return total
