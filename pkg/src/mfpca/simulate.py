"""Synthetic data generation and scoring metrics for replicate studies.

Two ground-truth families are available: closed-form periodic functions and
random cubic B-spline combinations orthonormalized by Gram-Schmidt under the
discretized multivariate inner product.  Score standard deviations decay as
l^(-1/alpha); cross-variable score correlation rho < 1 generates
variable-specific scores from a shared factor plus idiosyncratic noise.
"""

from __future__ import annotations

import csv
import json
import time as _time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import FunctionalDataset, build_dataset
from .engines import fit_mfvb, fit_vmp
from .errors import ConfigurationError
from .model import Hyperparameters
from .postprocess import orthonormalize, trapezoid_weights
from .select import SelectionConfig, model_choice, rule_of_thumb_K, select_L_pve
from .splines import build_basis, raw_bspline_design

TRUTH_GRID_SIZE = 1000
CI_Z = 1.959963984540054  # two-sided 95% normal quantile


@dataclass(frozen=True)
class SimulationScenario:
    """Ground-truth configuration for one synthetic study."""

    n: int
    p: int
    num_components: int
    obs_range: tuple[int, int] = (10, 20)
    family: str = "periodic"            # or "orthonormalized_bsplines"
    alpha: float = 2.0
    rho: float = 1.0
    noise_sd: float = 1.0
    sparse_obs: dict[int, tuple[int, int]] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.p < 1 or self.num_components < 1:
            raise ConfigurationError("n, p and num_components must be positive")
        if self.family not in ("periodic", "orthonormalized_bsplines"):
            raise ConfigurationError(f"unknown function family {self.family!r}")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigurationError("rho must lie in [0, 1]")
        for rng_ in [self.obs_range, *self.sparse_obs.values()]:
            if rng_[0] < 2 or rng_[1] < rng_[0]:
                raise ConfigurationError(f"impossible observation range {rng_}")

    def obs_range_for(self, j: int) -> tuple[int, int]:
        return self.sparse_obs.get(j, self.obs_range)

    def to_dict(self) -> dict:
        return {
            "n": self.n, "p": self.p, "num_components": self.num_components,
            "obs_range": list(self.obs_range), "family": self.family,
            "alpha": self.alpha, "rho": self.rho, "noise_sd": self.noise_sd,
            "sparse_obs": {str(k): list(v) for k, v in self.sparse_obs.items()},
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationScenario":
        return cls(
            n=int(d["n"]), p=int(d["p"]), num_components=int(d["num_components"]),
            obs_range=tuple(d.get("obs_range", (10, 20))),
            family=d.get("family", "periodic"),
            alpha=float(d.get("alpha", 2.0)), rho=float(d.get("rho", 1.0)),
            noise_sd=float(d.get("noise_sd", 1.0)),
            sparse_obs={int(k): tuple(v) for k, v in d.get("sparse_obs", {}).items()},
            seed=int(d.get("seed", 0)),
        )


class GroundTruth:
    """Evaluators for the true mean/eigenfunctions plus the drawn scores.

    ``scores`` has shape (n, L) when the scores are shared across variables
    (rho = 1) and (n, L, p) otherwise.
    """

    def __init__(self, family, p, num_components, mean_coefs, eig_coefs,
                 scores, noise_sd):
        self.family = family
        self.p = p
        self.num_components = num_components
        self._mean_coefs = mean_coefs   # b-spline families: (p, nb); periodic: None
        self._eig_coefs = eig_coefs     # (L, p, nb) or None
        self.scores = scores
        self.noise_sd = noise_sd

    @property
    def shared_scores(self) -> bool:
        return self.scores.ndim == 2

    def scores_for_variable(self, j: int) -> np.ndarray:
        return self.scores if self.shared_scores else self.scores[:, :, j]

    def mean_values(self, j: int, times: np.ndarray) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        if self.family == "periodic":
            sign = (-1.0) ** (j + 1)
            return sign * 2.0 * np.sin((2.0 * np.pi + (j + 1)) * times)
        return raw_bspline_design(times, self._mean_coefs.shape[1]) @ self._mean_coefs[j]

    def eigenfunction_values(self, l: int, j: int, times: np.ndarray) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        if self.family == "periodic":
            sign = (-1.0) ** (j + 1)
            harmonic = (l + 2) // 2            # paper's l' for 1-based l = l0 + 1
            amp = sign * np.sqrt(2.0 / self.p)
            if l % 2 == 0:
                return amp * np.cos(2.0 * harmonic * np.pi * times)
            return amp * np.sin(2.0 * harmonic * np.pi * times)
        return raw_bspline_design(times, self._eig_coefs.shape[2]) @ self._eig_coefs[l, j]

    def stacked_eigenfunction(self, l: int, times: np.ndarray) -> np.ndarray:
        return np.concatenate([self.eigenfunction_values(l, j, times)
                               for j in range(self.p)])

    def stacked_mean(self, times: np.ndarray) -> np.ndarray:
        return np.concatenate([self.mean_values(j, times) for j in range(self.p)])


def _bspline_truth(rng: np.random.Generator, p: int, L: int):
    """Random spline coefficients, Gram-Schmidt orthonormalized in H."""
    nb = max(L + 4, 8)
    mean_coefs = 2.0 * rng.standard_normal((p, nb))
    raw = rng.standard_normal((L, p, nb))
    grid = np.linspace(0.0, 1.0, TRUTH_GRID_SIZE)
    design = raw_bspline_design(grid, nb)
    w = trapezoid_weights(grid)
    gram = design.T @ (w[:, None] * design)    # per-variable L2 Gram of the basis

    def inner(a, b):
        return float(sum(a[j] @ gram @ b[j] for j in range(p)))

    coefs = np.zeros_like(raw)
    for l in range(L):
        v = raw[l].copy()
        for k in range(l):
            v -= inner(coefs[k], v) * coefs[k]
        norm = np.sqrt(inner(v, v))
        if norm < 1e-8:
            raise ConfigurationError("degenerate random draw in Gram-Schmidt; reseed")
        coefs[l] = v / norm
    return mean_coefs, coefs


def generate_dataset(scenario: SimulationScenario) -> tuple[FunctionalDataset, GroundTruth]:
    """Draw one synthetic dataset together with its generating truth."""
    rng = np.random.default_rng(scenario.seed)
    L, n, p = scenario.num_components, scenario.n, scenario.p

    mean_coefs = eig_coefs = None
    if scenario.family == "orthonormalized_bsplines":
        mean_coefs, eig_coefs = _bspline_truth(rng, p, L)

    sds = (np.arange(1, L + 1, dtype=float)) ** (-1.0 / scenario.alpha)
    if scenario.rho >= 1.0:
        scores = rng.standard_normal((n, L)) * sds[None, :]
    else:
        shared = rng.standard_normal((n, L))
        idio = rng.standard_normal((n, L, p))
        mix = (np.sqrt(scenario.rho) * shared[:, :, None]
               + np.sqrt(1.0 - scenario.rho) * idio)
        scores = mix * sds[None, :, None]

    truth = GroundTruth(scenario.family, p, L, mean_coefs, eig_coefs,
                        scores, scenario.noise_sd)

    subject_ids = [f"s{i + 1}" for i in range(n)]
    variable_names = [f"v{j + 1}" for j in range(p)]
    series = {}
    for i in range(n):
        for j in range(p):
            lo, hi = scenario.obs_range_for(j)
            count = int(rng.integers(lo, hi + 1))
            times = np.sort(rng.uniform(0.0, 1.0, size=count))
            values = truth.mean_values(j, times)
            zs = truth.scores_for_variable(j)[i]
            for l in range(L):
                values = values + zs[l] * truth.eigenfunction_values(l, j, times)
            values = values + rng.normal(0.0, scenario.noise_sd, size=count)
            series[(subject_ids[i], variable_names[j])] = list(zip(times, values))

    dataset = build_dataset(subject_ids, variable_names, series)
    return dataset, truth


# ---------------------------------------------------------------------------
# Metrics


def rmse_scores(estimated: np.ndarray, true: np.ndarray) -> np.ndarray:
    """Per-component root mean squared score error; inputs must be aligned."""
    estimated = np.asarray(estimated, dtype=float)
    true = np.asarray(true, dtype=float)
    if estimated.shape != true.shape:
        raise ValueError(f"shape mismatch: {estimated.shape} vs {true.shape}")
    return np.sqrt(np.mean((estimated - true) ** 2, axis=0))


def ise(estimated: np.ndarray, true: np.ndarray, times: np.ndarray) -> float:
    """Trapezoidal integrated squared error of one curve on a grid."""
    estimated = np.asarray(estimated, dtype=float)
    true = np.asarray(true, dtype=float)
    if estimated.shape != true.shape:
        raise ValueError(f"shape mismatch: {estimated.shape} vs {true.shape}")
    w = trapezoid_weights(times)
    return float(w @ (estimated - true) ** 2)


def ise_stacked(estimated: np.ndarray, true: np.ndarray, times: np.ndarray,
                p: int) -> float:
    """Per-variable integrated squared errors averaged across variables."""
    n_g = np.asarray(times).size
    est = np.asarray(estimated).reshape(p, n_g)
    tru = np.asarray(true).reshape(p, n_g)
    return float(np.mean([ise(est[j], tru[j], times) for j in range(p)]))


def align_to_truth(est_scores: np.ndarray, true_scores: np.ndarray):
    """Greedy matching of estimated to true components by |score correlation|.

    Returns, per true component, a pair (estimated column index, sign); sign
    makes the matched correlation positive.
    """
    lt = true_scores.shape[1]
    le = est_scores.shape[1]
    corr = np.zeros((lt, le))
    for a in range(lt):
        ta = true_scores[:, a]
        for b in range(le):
            eb = est_scores[:, b]
            sd = ta.std() * eb.std()
            corr[a, b] = 0.0 if sd < 1e-12 else float(np.corrcoef(ta, eb)[0, 1])
    matches: list[tuple[int, float] | None] = [None] * lt
    used_rows, used_cols = set(), set()
    flat = sorted(((abs(corr[a, b]), a, b) for a in range(lt) for b in range(le)),
                  reverse=True)
    for _, a, b in flat:
        if a in used_rows or b in used_cols:
            continue
        matches[a] = (b, 1.0 if corr[a, b] >= 0 else -1.0)
        used_rows.add(a)
        used_cols.add(b)
        if len(used_rows) == lt or len(used_cols) == le:
            break
    return matches


# ---------------------------------------------------------------------------
# Replicate studies


def _score_fit(fit, truth: GroundTruth, scale: float, variable: int | None):
    """Metric rows for one fitted decomposition against the truth.

    ``scale`` rescales estimated scores/sds (and divides eigenfunctions) for
    univariate runs compared in the multivariate space; ``variable`` is the
    fitted variable index for univariate runs, None for joint fits.  When the
    truth carries variable-specific scores, a joint fit is scored against
    each variable's scores and the metrics averaged.
    """
    times = fit.grid_times
    est_scores = fit.scores * scale
    sds = np.sqrt(np.maximum(np.einsum("nll->nl", fit.score_cov), 0.0)) * scale
    if variable is not None:
        truth_sets = [truth.scores_for_variable(variable)]
    elif truth.shared_scores:
        truth_sets = [truth.scores]
    else:
        truth_sets = [truth.scores_for_variable(j) for j in range(truth.p)]
    align_ref = np.mean(truth_sets, axis=0)
    matches = align_to_truth(est_scores, align_ref)
    rows = []
    for l, match in enumerate(matches):
        if match is None:
            rows.append({"component": l + 1, "rmse": np.nan, "ise": np.nan,
                         "coverage": np.nan, "mean_ci_length": np.nan})
            continue
        bidx, sign = match
        est_l = sign * est_scores[:, bidx]
        lo = est_l - CI_Z * sds[:, bidx]
        hi = est_l + CI_Z * sds[:, bidx]
        rmse = float(np.mean([rmse_scores(est_l[:, None], ts[:, [l]])[0]
                              for ts in truth_sets]))
        covered = float(np.mean([np.mean((ts[:, l] >= lo) & (ts[:, l] <= hi))
                                 for ts in truth_sets]))
        ci_len = float(np.mean(hi - lo))
        if variable is None:
            est_fun = sign * fit.eigenfunctions[:, bidx]
            true_fun = truth.stacked_eigenfunction(l, times)
            fun_ise = ise_stacked(est_fun, true_fun, times, truth.p)
        else:
            est_fun = sign * fit.eigenfunctions[:, bidx] / scale
            true_fun = truth.eigenfunction_values(l, variable, times)
            fun_ise = ise(est_fun, true_fun, times)
        rows.append({"component": l + 1, "rmse": rmse, "ise": fun_ise,
                     "coverage": covered, "mean_ci_length": ci_len})
    if variable is None:
        mean_ise = ise_stacked(fit.mean.reshape(-1), truth.stacked_mean(times),
                               times, truth.p)
    else:
        mean_ise = ise(fit.mean[0], truth.mean_values(variable, times), times)
    rows.append({"component": "mean", "rmse": np.nan, "ise": mean_ise,
                 "coverage": np.nan, "mean_ci_length": np.nan})
    return rows


def _replicate_seed(base: int, r: int) -> int:
    return int(np.random.SeedSequence([base, r]).generate_state(1)[0])


def _run_replicate(args):
    (scenario, r, methods, hyper, selection, engine, grid_size) = args
    rep_scenario = replace(scenario, seed=_replicate_seed(scenario.seed, r))
    dataset, truth = generate_dataset(rep_scenario)
    fitter = fit_mfvb if engine == "mfvb" else fit_vmp
    rows = []

    def fit_one(ds, num_splines_list, seed_offset):
        t0 = _time.perf_counter()
        hy = replace(hyper, seed=_replicate_seed(hyper.seed, seed_offset))
        bases = [build_basis(k) for k in num_splines_list]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            raw = fitter(ds, bases, hy)
            fit = orthonormalize(raw, grid_size)
        return fit, raw.converged, _time.perf_counter() - t0

    if selection.k_strategy == "model_choice":
        def choose_k(ds):
            cands = [(k, hyper.num_components)
                     for k in range(selection.k_min, selection.k_max + 1)]
            res = model_choice(ds, cands, hyper, engine=engine)
            best = max(res, key=lambda c: c.posterior_prob)
            return [best.num_splines] * ds.p
    else:
        def choose_k(ds):
            return rule_of_thumb_K(ds)

    if "mfpca" in methods:
        fit, conv, rt = fit_one(dataset, choose_k(dataset), seed_offset=10_000 + r)
        sel = select_L_pve(fit, selection.pve_threshold)
        for row in _score_fit(fit, truth, scale=1.0, variable=None):
            rows.append({"replicate": r, "method": "mfpca", "variable": "",
                         "selected_L": sel, "converged": conv, "runtime_s": rt, **row})
    if "univariate" in methods:
        scale = np.sqrt(truth.p)
        for j in range(dataset.p):
            ds_j = dataset.subset_variable(j)
            fit, conv, rt = fit_one(ds_j, choose_k(ds_j),
                                    seed_offset=20_000 + r * dataset.p + j)
            sel = select_L_pve(fit, selection.pve_threshold)
            for row in _score_fit(fit, truth, scale=scale, variable=j):
                rows.append({"replicate": r, "method": "univariate",
                             "variable": dataset.variable_names[j],
                             "selected_L": sel, "converged": conv,
                             "runtime_s": rt, **row})
    return rows


def run_replicates(scenario: SimulationScenario, methods=("mfpca",), num_replicates=1,
                   hyper: Hyperparameters | None = None,
                   selection: SelectionConfig | None = None,
                   engine: str = "mfvb", grid_size: int = 400,
                   threads: int = 0) -> list[dict]:
    """Generate-fit-score over seeded replicates; failures are recorded rows."""
    hyper = hyper or Hyperparameters(num_components=max(scenario.num_components + 2, 4))
    selection = selection or SelectionConfig()
    jobs = [(scenario, r, tuple(methods), hyper, selection, engine, grid_size)
            for r in range(num_replicates)]
    all_rows: list[dict] = []
    if threads and threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_replicate, jobs))
    else:
        results = []
        for job in jobs:
            try:
                results.append(_run_replicate(job))
            except Exception as exc:  # noqa: BLE001 - record and continue
                results.append([{"replicate": job[1], "method": "error",
                                 "variable": "", "component": "",
                                 "rmse": np.nan, "ise": np.nan, "coverage": np.nan,
                                 "mean_ci_length": np.nan, "selected_L": -1,
                                 "converged": False, "runtime_s": np.nan,
                                 "error": repr(exc)}])
    for rows in results:
        all_rows.extend(rows)
    return all_rows


RESULT_COLUMNS = ["replicate", "method", "variable", "component", "rmse", "ise",
                  "coverage", "mean_ci_length", "selected_L", "converged",
                  "runtime_s", "error"]


def write_results_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, restval="",
                                extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_truth(truth: GroundTruth, outdir, grid_size: int = 200) -> None:
    """Export the generating truth: functions on a grid, scores, metadata."""
    import os
    times = np.linspace(0.0, 1.0, grid_size)
    L = truth.num_components
    with open(os.path.join(outdir, "truth_functions.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variable", "t", "mean"] + [f"psi_{l + 1}" for l in range(L)])
        for j in range(truth.p):
            mean = truth.mean_values(j, times)
            eig = [truth.eigenfunction_values(l, j, times) for l in range(L)]
            for g in range(grid_size):
                writer.writerow([f"v{j + 1}", f"{times[g]:.17g}", f"{mean[g]:.17g}"]
                                + [f"{eig[l][g]:.17g}" for l in range(L)])
    with open(os.path.join(outdir, "truth_scores.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if truth.shared_scores:
            writer.writerow(["subject"] + [f"zeta_{l + 1}" for l in range(L)])
            for i in range(truth.scores.shape[0]):
                writer.writerow([f"s{i + 1}"] + [f"{truth.scores[i, l]:.17g}"
                                                 for l in range(L)])
        else:
            writer.writerow(["subject", "variable"] + [f"zeta_{l + 1}" for l in range(L)])
            for i in range(truth.scores.shape[0]):
                for j in range(truth.p):
                    writer.writerow([f"s{i + 1}", f"v{j + 1}"]
                                    + [f"{truth.scores[i, l, j]:.17g}" for l in range(L)])
    with open(os.path.join(outdir, "truth_meta.json"), "w", encoding="utf-8") as fh:
        json.dump({"family": truth.family, "num_components": L,
                   "noise_sd": truth.noise_sd, "shared_scores": truth.shared_scores},
                  fh, indent=2)
