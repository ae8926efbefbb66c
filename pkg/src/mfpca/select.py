"""Adaptive selection of the spline-basis size K and component count L:
observation-count rule of thumb, ELBO-based model choice over a candidate
grid, and cumulative variance-share thresholding.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .dataset import FunctionalDataset
from .engines import fit_mfvb, fit_vmp
from .errors import ConfigurationError
from .model import Hyperparameters
from .postprocess import OrthonormalizedFit
from .splines import build_basis

logger = logging.getLogger(__name__)

RULE_MIN_K = 7
RULE_MAX_K = 40


@dataclass(frozen=True)
class SelectionConfig:
    k_min: int = 5
    k_max: int = 20
    l_min: int = 1
    l_max: int = 10
    pve_threshold: float = 0.95
    k_strategy: str = "rule_of_thumb"   # or "model_choice"
    l_strategy: str = "pve"             # or "model_choice"

    def __post_init__(self):
        if self.k_min > self.k_max or self.l_min > self.l_max:
            raise ConfigurationError("selection grid bounds out of order")
        if not 0.0 < self.pve_threshold <= 1.0:
            raise ConfigurationError("pve_threshold must lie in (0, 1]")
        if self.k_strategy not in ("rule_of_thumb", "model_choice"):
            raise ConfigurationError(f"unknown K strategy {self.k_strategy!r}")
        if self.l_strategy not in ("pve", "model_choice"):
            raise ConfigurationError(f"unknown L strategy {self.l_strategy!r}")


def rule_of_thumb_K(dataset: FunctionalDataset) -> list[int]:
    """Per-variable K = max(min(floor(median count / 4), 40), 7)."""
    out = []
    for j in range(dataset.p):
        med = float(np.median(dataset.counts(j)))
        out.append(int(max(min(np.floor(med / 4.0), RULE_MAX_K), RULE_MIN_K)))
    return out


@dataclass
class CandidateResult:
    num_splines: int
    num_components: int
    elbo: float
    posterior_prob: float
    converged: bool
    seed: int


def candidate_seed(base_seed: int, num_splines: int, num_components: int) -> int:
    """Stable per-candidate seed so grid fits are reproducible independently."""
    ss = np.random.SeedSequence([base_seed, num_splines, num_components])
    return int(ss.generate_state(1)[0])


def _fit_candidate(args) -> tuple[int, int, float, bool, int]:
    dataset, k, l, hyper, engine = args
    seed = candidate_seed(hyper.seed, k, l)
    cand_hyper = replace(hyper, num_components=l, num_splines=k, seed=seed)
    bases = [build_basis(k) for _ in range(dataset.p)]
    fitter = fit_mfvb if engine == "mfvb" else fit_vmp
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fitter(dataset, bases, cand_hyper)
    return k, l, fit.elbo_trace[-1], fit.converged, seed


def model_choice(dataset: FunctionalDataset, candidates: list[tuple[int, int]],
                 hyper: Hyperparameters, engine: str = "mfvb",
                 threads: int = 0) -> list[CandidateResult]:
    """Fit every (K, L) candidate independently and weight by exp(ELBO).

    A discrete uniform prior over candidates gives posterior probabilities
    softmax(ELBO - max ELBO).  Non-converged candidates keep their final ELBO
    and are flagged with a warning.
    """
    if not candidates:
        raise ConfigurationError("model choice needs a non-empty candidate grid")
    jobs = [(dataset, k, l, hyper, engine) for k, l in candidates]
    failures = []
    rows: list[tuple[int, int, float, bool, int] | None] = [None] * len(jobs)
    if threads and threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for idx, res in enumerate(pool.map(_fit_candidate, jobs)):
                rows[idx] = res
    else:
        for idx, job in enumerate(jobs):
            try:
                rows[idx] = _fit_candidate(job)
            except Exception as exc:  # noqa: BLE001 - per-candidate diagnostics
                failures.append((job[1], job[2], repr(exc)))
    if failures and len(failures) == len(jobs):
        raise RuntimeError(f"all model-choice candidates failed: {failures}")
    rows = [r for r in rows if r is not None]

    elbos = np.array([r[2] for r in rows])
    logits = elbos - elbos.max()
    probs = np.exp(logits)
    probs /= probs.sum()
    results = []
    for (k, l, e, conv, seed), prob in zip(rows, probs):
        if not conv:
            warnings.warn(f"model-choice candidate (K={k}, L={l}) did not converge; "
                          "its final ELBO is used")
        results.append(CandidateResult(num_splines=k, num_components=l, elbo=float(e),
                                       posterior_prob=float(prob), converged=conv,
                                       seed=seed))
    return results


def select_L_pve(fit: OrthonormalizedFit, threshold: float = 0.95) -> int:
    """Smallest L whose cumulative variance share reaches the threshold."""
    cum = np.cumsum(fit.pve)
    hits = np.nonzero(cum >= threshold - 1e-12)[0]
    if hits.size == 0:
        return fit.num_components
    return int(hits[0]) + 1
