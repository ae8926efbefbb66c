import dataclasses
import warnings

import numpy as np
import pytest

from mfpca.dataset import build_dataset
from mfpca.errors import ConfigurationError
from mfpca.select import (SelectionConfig, model_choice, rule_of_thumb_K,
                          select_L_pve)
from mfpca.model import Hyperparameters
from mfpca.postprocess import orthonormalize
from mfpca.simulate import SimulationScenario, generate_dataset


def _dataset_with_counts(counts_per_variable):
    rng = np.random.default_rng(0)
    p = len(counts_per_variable)
    series = {}
    n = len(counts_per_variable[0])
    for j in range(p):
        for i, count in enumerate(counts_per_variable[j]):
            t = np.sort(rng.uniform(size=count))
            series[(f"s{i}", f"v{j}")] = [(tk, 0.0) for tk in t]
    return build_dataset([f"s{i}" for i in range(n)],
                         [f"v{j}" for j in range(p)], series)


@pytest.mark.parametrize("median,expected", [(20, 7), (160, 40), (100, 25)])
def test_rule_of_thumb_values(median, expected):
    ds = _dataset_with_counts([[median, median, median]])
    assert rule_of_thumb_K(ds) == [expected]


def test_rule_of_thumb_floor_before_clamp():
    # median 30 -> 30/4 = 7.5 floored to 7
    ds = _dataset_with_counts([[30, 30, 30]])
    assert rule_of_thumb_K(ds) == [7]


def test_rule_of_thumb_bounds():
    for counts in ([2, 2, 3], [300, 400, 500], [38, 41, 44]):
        ds = _dataset_with_counts([counts])
        k = rule_of_thumb_K(ds)[0]
        assert 7 <= k <= 40


def test_rule_of_thumb_per_variable():
    ds = _dataset_with_counts([[20, 20, 20], [100, 100, 100]])
    assert rule_of_thumb_K(ds) == [7, 25]


def test_selection_config_validation():
    with pytest.raises(ConfigurationError):
        SelectionConfig(k_min=10, k_max=5)
    with pytest.raises(ConfigurationError):
        SelectionConfig(pve_threshold=0.0)
    with pytest.raises(ConfigurationError):
        SelectionConfig(l_strategy="magic")


class _FitStub:
    def __init__(self, pve):
        self.pve = np.asarray(pve, dtype=float)

    @property
    def num_components(self):
        return self.pve.size


def test_select_L_pve_examples():
    assert select_L_pve(_FitStub([0.8, 0.15, 0.04, 0.01]), 0.95) == 2
    assert select_L_pve(_FitStub([1.0, 0.0, 0.0]), 0.95) == 1


def test_select_L_pve_monotone_in_threshold():
    fit = _FitStub([0.6, 0.25, 0.1, 0.05])
    previous = 0
    for threshold in (0.5, 0.6, 0.85, 0.9, 0.95, 1.0):
        sel = select_L_pve(fit, threshold)
        assert sel >= previous
        previous = sel
    assert select_L_pve(fit, 1.0) == 4


def test_select_L_pve_alpha_decay_oracle():
    # scores with Var = l^(-2/alpha): compare against the analytic shares
    rng = np.random.default_rng(6)
    alpha, L = 2.0, 5
    variances = np.arange(1, L + 1) ** (-2.0 / alpha)
    scores = rng.standard_normal((200_000, L)) * np.sqrt(variances)
    empirical = np.var(scores, axis=0, ddof=1)
    fit = _FitStub(empirical / empirical.sum())
    shares = np.cumsum(variances) / variances.sum()
    for threshold in (0.6, 0.8, 0.9, 0.99):
        analytic = int(np.nonzero(shares >= threshold)[0][0]) + 1
        assert select_L_pve(fit, threshold) == analytic


def test_softmax_probabilities_match_hand_example():
    # ELBOs (-100, -99, -101): softmax = (e^-1, 1, e^-2)/Z
    scenario = SimulationScenario(n=12, p=1, num_components=1,
                                  obs_range=(6, 9), seed=2)
    dataset, _ = generate_dataset(scenario)
    hyper = Hyperparameters(num_components=1, seed=0, max_iter=60)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        results = model_choice(dataset, [(4, 1), (5, 1), (6, 1)], hyper)
    elbos = np.array([r.elbo for r in results])
    logits = np.exp(elbos - elbos.max())
    expect = logits / logits.sum()
    probs = np.array([r.posterior_prob for r in results])
    assert np.allclose(probs, expect, atol=1e-12)
    assert probs.sum() == pytest.approx(1.0)
    # shift invariance of the softmax itself
    shifted = np.exp((elbos + 123.0) - (elbos + 123.0).max())
    assert np.allclose(shifted / shifted.sum(), expect)


def test_model_choice_single_candidate():
    scenario = SimulationScenario(n=10, p=1, num_components=1,
                                  obs_range=(6, 9), seed=4)
    dataset, _ = generate_dataset(scenario)
    hyper = Hyperparameters(num_components=1, seed=0, max_iter=50)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        results = model_choice(dataset, [(5, 1)], hyper)
    assert len(results) == 1
    assert results[0].posterior_prob == pytest.approx(1.0)


def test_model_choice_empty_grid_rejected():
    scenario = SimulationScenario(n=10, p=1, num_components=1,
                                  obs_range=(6, 9), seed=4)
    dataset, _ = generate_dataset(scenario)
    hyper = Hyperparameters(num_components=1, seed=0)
    with pytest.raises(ConfigurationError):
        model_choice(dataset, [], hyper)


def test_model_choice_deterministic():
    scenario = SimulationScenario(n=12, p=1, num_components=1,
                                  obs_range=(6, 9), seed=2)
    dataset, _ = generate_dataset(scenario)
    hyper = Hyperparameters(num_components=1, seed=0, max_iter=40)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        r1 = model_choice(dataset, [(4, 1), (5, 1)], hyper)
        r2 = model_choice(dataset, [(4, 1), (5, 1)], hyper)
    assert [(a.elbo, a.posterior_prob) for a in r1] == \
        [(b.elbo, b.posterior_prob) for b in r2]
