import numpy as np
import pytest

from mfpca.errors import ConfigurationError
from mfpca.postprocess import h_inner
from mfpca.simulate import (SimulationScenario, align_to_truth, generate_dataset,
                            ise, ise_stacked, rmse_scores, run_replicates)


def test_periodic_formulas_at_zero():
    scenario = SimulationScenario(n=2, p=3, num_components=2, obs_range=(3, 4),
                                  seed=0)
    _, truth = generate_dataset(scenario)
    t0 = np.array([0.0])
    assert truth.mean_values(0, t0)[0] == pytest.approx(0.0)  # -2 sin(0)
    assert truth.eigenfunction_values(0, 0, t0)[0] == pytest.approx(
        -np.sqrt(2.0 / 3.0))
    # second variable flips sign
    assert truth.eigenfunction_values(0, 1, t0)[0] == pytest.approx(
        np.sqrt(2.0 / 3.0))
    # second component is the sine of the same harmonic: zero at t=0
    assert truth.eigenfunction_values(1, 0, t0)[0] == pytest.approx(0.0)


@pytest.mark.parametrize("family", ["periodic", "orthonormalized_bsplines"])
@pytest.mark.parametrize("L", [2, 3])
def test_truth_eigenfunctions_h_orthonormal(family, L):
    scenario = SimulationScenario(n=2, p=3, num_components=L, obs_range=(3, 4),
                                  family=family, seed=5)
    _, truth = generate_dataset(scenario)
    times = np.linspace(0, 1, 1000)
    for a in range(L):
        fa = truth.stacked_eigenfunction(a, times)
        for b in range(a, L):
            fb = truth.stacked_eigenfunction(b, times)
            target = 1.0 if a == b else 0.0
            assert abs(h_inner(fa, fb, times) - target) < 1e-4


def test_score_decay_exponent():
    scenario = SimulationScenario(n=10_000, p=1, num_components=3,
                                  obs_range=(2, 3), alpha=2.0, seed=8)
    _, truth = generate_dataset(scenario)
    sds = truth.scores.std(axis=0, ddof=1)
    expect = np.array([1.0, 2 ** -0.5, 3 ** -0.5])
    se = expect / np.sqrt(2 * 10_000)
    assert np.all(np.abs(sds - expect) < 3 * se)


def test_observation_counts_within_ranges():
    scenario = SimulationScenario(n=30, p=2, num_components=1, obs_range=(5, 9),
                                  sparse_obs={1: (12, 15)}, seed=3)
    dataset, _ = generate_dataset(scenario)
    c0 = dataset.counts(0)
    c1 = dataset.counts(1)
    assert c0.min() >= 5 and c0.max() <= 9
    assert c1.min() >= 12 and c1.max() <= 15


def test_odd_component_count_truncates_pairs():
    scenario = SimulationScenario(n=2, p=2, num_components=3, obs_range=(3, 4),
                                  seed=1)
    _, truth = generate_dataset(scenario)
    times = np.linspace(0, 1, 500)
    # third function is the cosine of the second harmonic pair
    vals = truth.eigenfunction_values(2, 0, times)
    expect = -np.sqrt(1.0) * np.sqrt(2.0 / 2.0) * np.cos(4 * np.pi * times)
    assert np.allclose(vals, expect)


def test_rho_one_shares_scores_structurally():
    scenario = SimulationScenario(n=5, p=3, num_components=2, obs_range=(3, 4),
                                  rho=1.0, seed=2)
    _, truth = generate_dataset(scenario)
    assert truth.shared_scores
    assert truth.scores.shape == (5, 2)
    assert np.array_equal(truth.scores_for_variable(0),
                          truth.scores_for_variable(2))


def test_rho_correlated_scores():
    rho = 0.6
    scenario = SimulationScenario(n=40_000, p=2, num_components=1,
                                  obs_range=(2, 3), rho=rho, alpha=1.0, seed=12)
    _, truth = generate_dataset(scenario)
    assert not truth.shared_scores
    a = truth.scores[:, 0, 0]
    b = truth.scores[:, 0, 1]
    corr = np.corrcoef(a, b)[0, 1]
    assert abs(corr - rho) < 0.02
    assert abs(a.std() - 1.0) < 0.02


def test_scenario_validation_and_json():
    with pytest.raises(ConfigurationError):
        SimulationScenario(n=5, p=1, num_components=1, obs_range=(1, 3))
    with pytest.raises(ConfigurationError):
        SimulationScenario(n=5, p=1, num_components=1, rho=1.5)
    scenario = SimulationScenario(n=5, p=2, num_components=2, obs_range=(3, 7),
                                  sparse_obs={0: (2, 4)}, seed=9)
    back = SimulationScenario.from_dict(scenario.to_dict())
    assert back == scenario


def test_rmse_scores_basic():
    truth = np.arange(12.0).reshape(4, 3)
    assert np.allclose(rmse_scores(truth, truth), 0.0)
    assert np.allclose(rmse_scores(truth + 1.0, truth), [1.0, 1.0, 1.0])
    with pytest.raises(ValueError):
        rmse_scores(truth, truth[:, :2])


def test_ise_basic():
    times = np.linspace(0, 1, 2000)
    f = times.copy()
    assert ise(f, f, times) == pytest.approx(0.0)
    assert ise(f, np.zeros_like(f), times) == pytest.approx(1.0 / 3.0, abs=1e-5)
    stacked_est = np.concatenate([f, np.zeros_like(f)])
    stacked_true = np.concatenate([f, f])
    assert ise_stacked(stacked_est, stacked_true, times, p=2) == pytest.approx(
        1.0 / 6.0, abs=1e-5)


def test_align_to_truth_permutation_and_sign():
    rng = np.random.default_rng(4)
    truth = rng.standard_normal((500, 3)) * np.array([2.0, 1.0, 0.5])
    est = np.column_stack([-truth[:, 2], truth[:, 0], -truth[:, 1]])
    est = est + 0.01 * rng.standard_normal(est.shape)
    matches = align_to_truth(est, truth)
    assert matches[0] == (1, 1.0)
    assert matches[1][0] == 2 and matches[1][1] == -1.0
    assert matches[2][0] == 0 and matches[2][1] == -1.0
    aligned = np.column_stack([s * est[:, b] for (b, s) in matches])
    assert np.allclose(rmse_scores(aligned, truth), 0.01, atol=0.01)


def test_metrics_invariant_to_alignment_convention():
    rng = np.random.default_rng(14)
    truth = rng.standard_normal((300, 2)) * np.array([2.0, 1.0])
    est = truth + 0.1 * rng.standard_normal(truth.shape)
    base = [rmse_scores(
        np.column_stack([s * est[:, b] for (b, s) in align_to_truth(est, truth)]),
        truth)]
    flipped = est * np.array([-1.0, 1.0])[None, :]
    permuted = flipped[:, ::-1]
    for variant in (flipped, permuted):
        matches = align_to_truth(variant, truth)
        aligned = np.column_stack([s * variant[:, b] for (b, s) in matches])
        assert np.allclose(rmse_scores(aligned, truth), base[0])


def test_run_replicates_single_row_structure():
    scenario = SimulationScenario(n=12, p=2, num_components=1, obs_range=(6, 10),
                                  alpha=1.0, seed=21)
    from mfpca.model import Hyperparameters
    hyper = Hyperparameters(num_components=2, seed=1, max_iter=150)
    rows = run_replicates(scenario, methods=("mfpca",), num_replicates=1,
                          hyper=hyper, grid_size=120)
    assert {r["method"] for r in rows} == {"mfpca"}
    components = [r["component"] for r in rows]
    assert components == [1, "mean"]
    assert all(r["replicate"] == 0 for r in rows)
    assert np.isfinite(rows[0]["rmse"])
    assert np.isfinite(rows[0]["coverage"])


def test_run_replicates_deterministic():
    scenario = SimulationScenario(n=10, p=1, num_components=1, obs_range=(6, 9),
                                  alpha=1.0, seed=33)
    from mfpca.model import Hyperparameters
    hyper = Hyperparameters(num_components=1, seed=2, max_iter=100)
    rows1 = run_replicates(scenario, methods=("mfpca",), num_replicates=2,
                           hyper=hyper, grid_size=100)
    rows2 = run_replicates(scenario, methods=("mfpca",), num_replicates=2,
                           hyper=hyper, grid_size=100)
    for a, b in zip(rows1, rows2):
        for key in ("rmse", "ise", "coverage", "selected_L"):
            if isinstance(a[key], float) and np.isnan(a[key]):
                assert np.isnan(b[key])
            else:
                assert a[key] == b[key]


def test_run_replicates_univariate_rescaling():
    scenario = SimulationScenario(n=25, p=2, num_components=1, obs_range=(15, 20),
                                  alpha=1.0, seed=7)
    from mfpca.model import Hyperparameters
    hyper = Hyperparameters(num_components=1, seed=3, max_iter=200)
    rows = run_replicates(scenario, methods=("mfpca", "univariate"),
                          num_replicates=1, hyper=hyper, grid_size=150)
    uni = [r for r in rows if r["method"] == "univariate" and r["component"] == 1]
    assert len(uni) == 2
    # univariate scores rescaled into the joint space: same order of magnitude
    joint = [r for r in rows if r["method"] == "mfpca" and r["component"] == 1][0]
    for r in uni:
        assert r["rmse"] < 10 * max(joint["rmse"], 0.1)
