import warnings

import pytest

from mfpca.engines import fit_mfvb
from mfpca.model import Hyperparameters
from mfpca.simulate import SimulationScenario, generate_dataset
from mfpca.splines import build_basis


@pytest.fixture(scope="session")
def small_scenario():
    return SimulationScenario(n=50, p=3, num_components=2, obs_range=(10, 20),
                              alpha=1.0, seed=3)


@pytest.fixture(scope="session")
def small_data(small_scenario):
    return generate_dataset(small_scenario)


@pytest.fixture(scope="session")
def small_mfvb_fit(small_data):
    dataset, _ = small_data
    hyper = Hyperparameters(num_components=4, seed=1, max_iter=500)
    bases = [build_basis(7) for _ in range(dataset.p)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fit_mfvb(dataset, bases, hyper)
