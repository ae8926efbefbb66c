"""Exponential-family algebra: vec/vech operators, duplication matrices, and
natural-parameter maps for the multivariate normal and inverse chi-squared
families.

Two Gaussian representations are supported.  The "vec" form carries the full
column-stacked second natural block; the "vech" form stores only the lower
triangle (mapped through the duplication matrix).  Messages in the same form
add natural-parameter-wise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import digamma, gammaln

from .errors import NumericalError

logger = logging.getLogger(__name__)

RIDGE_REL = 1e-10


def vec(a: np.ndarray) -> np.ndarray:
    """Stack the columns of a matrix into a single vector, left to right."""
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValueError(f"vec expects a matrix, got ndim={a.ndim}")
    return np.ravel(a, order="F")


def vec_inv(v: np.ndarray, d: int) -> np.ndarray:
    """Inverse of :func:`vec` for a d x d matrix."""
    v = np.asarray(v)
    if v.size != d * d:
        raise ValueError(f"vec_inv expects length {d * d}, got {v.size}")
    return v.reshape((d, d), order="F")


def vech(a: np.ndarray) -> np.ndarray:
    """Stack the columns of a square matrix after dropping above-diagonal entries."""
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"vech expects a square matrix, got shape {a.shape}")
    d = a.shape[0]
    return np.concatenate([a[c:, c] for c in range(d)])


def vech_inv(v: np.ndarray, d: int) -> np.ndarray:
    """Rebuild a symmetric d x d matrix from its vech image."""
    v = np.asarray(v)
    if v.size != d * (d + 1) // 2:
        raise ValueError(f"vech_inv expects length {d * (d + 1) // 2}, got {v.size}")
    out = np.zeros((d, d))
    pos = 0
    for c in range(d):
        out[c:, c] = v[pos : pos + d - c]
        pos += d - c
    return out + np.tril(out, -1).T


def duplication(d: int) -> np.ndarray:
    """Duplication matrix D_d with D_d vech(A) = vec(A) for symmetric A."""
    if d < 1:
        raise ValueError("duplication order must be >= 1")
    D = np.zeros((d * d, d * (d + 1) // 2))
    col = 0
    for c in range(d):
        for r in range(c, d):
            D[r + c * d, col] = 1.0
            D[c + r * d, col] = 1.0
            col += 1
    return D


def duplication_pinv(d: int) -> np.ndarray:
    """Moore-Penrose inverse (D_d^T D_d)^{-1} D_d^T, with D_d^+ vec(A) = vech(A)."""
    D = duplication(d)
    return np.linalg.solve(D.T @ D, D.T)


def spd_inverse(mat: np.ndarray, context: str = "") -> np.ndarray:
    """Invert a symmetric positive-definite matrix via Cholesky.

    On factorization failure a ridge of RIDGE_REL * trace/d is added once and
    the event is logged; a second failure raises NumericalError.
    """
    mat = np.asarray(mat, dtype=float)
    d = mat.shape[0]
    eye = np.eye(d)
    try:
        c, low = cho_factor(mat, lower=True, check_finite=False)
        return cho_solve((c, low), eye, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    ridge = RIDGE_REL * np.trace(mat) / d
    if not np.isfinite(ridge) or ridge <= 0:
        ridge = RIDGE_REL
    logger.warning("SPD factorization failed%s; retrying with ridge %.3e",
                   f" ({context})" if context else "", ridge)
    try:
        c, low = cho_factor(mat + ridge * eye, lower=True, check_finite=False)
        return cho_solve((c, low), eye, check_finite=False)
    except np.linalg.LinAlgError as exc:
        cond = np.linalg.cond(mat)
        raise NumericalError(
            f"non-SPD precision{f' ({context})' if context else ''}: "
            f"condition number {cond:.3e}") from exc


@dataclass
class GaussianNatural:
    """Natural parameters of a multivariate normal density.

    eta1 has length d.  In "vec" form eta2 has length d^2 and equals
    -1/2 vec(precision); in "vech" form it has length d(d+1)/2 and equals
    the duplication-matrix image -1/2 D_d^T vec(precision).
    """

    eta1: np.ndarray
    eta2: np.ndarray
    form: str = "vec"

    def __post_init__(self):
        self.eta1 = np.asarray(self.eta1, dtype=float)
        self.eta2 = np.asarray(self.eta2, dtype=float)
        d = self.eta1.size
        expected = d * d if self.form == "vec" else d * (d + 1) // 2
        if self.form not in ("vec", "vech"):
            raise ValueError(f"unknown Gaussian natural form {self.form!r}")
        if self.eta2.size != expected:
            raise ValueError(
                f"eta2 length {self.eta2.size} inconsistent with d={d} in {self.form} form")

    @property
    def dim(self) -> int:
        return self.eta1.size

    def __add__(self, other: "GaussianNatural") -> "GaussianNatural":
        if not isinstance(other, GaussianNatural):
            return NotImplemented
        if other.form != self.form or other.dim != self.dim:
            raise ValueError("cannot add Gaussian naturals with mismatched form/dimension")
        return GaussianNatural(self.eta1 + other.eta1, self.eta2 + other.eta2, self.form)

    def precision(self) -> np.ndarray:
        """The implied precision matrix -2 * unvec(eta2)."""
        d = self.dim
        if self.form == "vec":
            return -2.0 * vec_inv(self.eta2, d)
        return -2.0 * vec_inv(duplication_pinv(d).T @ self.eta2, d)

    def is_proper(self) -> bool:
        prec = self.precision()
        prec = 0.5 * (prec + prec.T)
        try:
            eig = np.linalg.eigvalsh(prec)
        except np.linalg.LinAlgError:
            return False
        return bool(np.all(np.isfinite(eig)) and eig.min() > 0)


def gauss_to_natural(mean: np.ndarray, cov: np.ndarray, form: str = "vec") -> GaussianNatural:
    """Map (mean, covariance) to the Gaussian natural-parameter vector."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    d = mean.size
    prec = spd_inverse(cov, context="gauss_to_natural")
    eta1 = prec @ mean
    eta2_vec = -0.5 * vec(prec)
    if form == "vec":
        return GaussianNatural(eta1, eta2_vec, "vec")
    if form == "vech":
        return GaussianNatural(eta1, duplication(d).T @ eta2_vec, "vech")
    raise ValueError(f"unknown Gaussian natural form {form!r}")


def gauss_from_natural(nat: GaussianNatural) -> tuple[np.ndarray, np.ndarray]:
    """Inverse natural-parameter map, returning (mean, covariance)."""
    prec = nat.precision()
    prec = 0.5 * (prec + prec.T)
    cov = spd_inverse(prec, context="gauss_from_natural")
    cov = 0.5 * (cov + cov.T)
    return cov @ nat.eta1, cov


def gaussian_entropy(cov: np.ndarray) -> float:
    """Differential entropy of a multivariate normal with the given covariance."""
    cov = np.asarray(cov, dtype=float)
    d = cov.shape[0]
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise NumericalError("gaussian_entropy: covariance not positive definite")
    return 0.5 * (d * (1.0 + np.log(2.0 * np.pi)) + logdet)


@dataclass
class InvChiSqNatural:
    """Natural parameters of an inverse chi-squared density.

    Sufficient statistics are (log x, 1/x); a proper density has eta1 < -1
    and eta2 < 0, corresponding to shape -2*eta1 - 2 > 0 and scale -2*eta2 > 0.
    """

    eta1: float
    eta2: float

    def __add__(self, other: "InvChiSqNatural") -> "InvChiSqNatural":
        if not isinstance(other, InvChiSqNatural):
            return NotImplemented
        return InvChiSqNatural(self.eta1 + other.eta1, self.eta2 + other.eta2)

    def is_proper(self) -> bool:
        return self.eta1 < -1.0 and self.eta2 < 0.0


def invchisq_to_natural(shape: float, scale: float) -> InvChiSqNatural:
    """Map (shape, scale) of an inverse chi-squared density to natural parameters."""
    if shape <= 0 or scale <= 0:
        raise ValueError("inverse chi-squared shape and scale must be positive")
    return InvChiSqNatural(-0.5 * (shape + 2.0), -0.5 * scale)


def invchisq_from_natural(nat: InvChiSqNatural) -> tuple[float, float]:
    """Inverse natural-parameter map, returning (shape, scale)."""
    _require_proper(nat)
    return -2.0 * nat.eta1 - 2.0, -2.0 * nat.eta2


def invchisq_mean_reciprocal(nat: InvChiSqNatural) -> float:
    """E(1/x) = (eta1 + 1)/eta2, equal to shape/scale."""
    _require_proper(nat)
    return (nat.eta1 + 1.0) / nat.eta2


def invchisq_mean_log(nat: InvChiSqNatural) -> float:
    """E(log x) = log(scale/2) - digamma(shape/2)."""
    shape, scale = invchisq_from_natural(nat)
    return np.log(scale / 2.0) - digamma(shape / 2.0)


def invchisq_entropy(nat: InvChiSqNatural) -> float:
    """Differential entropy of the inverse chi-squared density."""
    shape, scale = invchisq_from_natural(nat)
    a, b = shape / 2.0, scale / 2.0
    return a + np.log(b) + gammaln(a) - (1.0 + a) * digamma(a)


def _require_proper(nat: InvChiSqNatural) -> None:
    if not nat.is_proper():
        raise NumericalError(
            f"improper inverse chi-squared natural parameters ({nat.eta1}, {nat.eta2})")
