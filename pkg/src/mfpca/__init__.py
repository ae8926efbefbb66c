"""Variational Bayesian multivariate functional principal component analysis
for sparsely and irregularly observed curves.
"""

__version__ = "0.1.0"

from .dataset import ColumnConfig, FunctionalDataset, load_long_csv, validate
from .engines import RawFit, elbo, fit_mfvb, fit_vmp
from .model import Hyperparameters
from .postprocess import (OrthonormalizedFit, align_signs, h_inner, orthonormalize,
                          predict_trajectory, pve)
from .select import SelectionConfig, model_choice, rule_of_thumb_K, select_L_pve
from .simulate import (GroundTruth, SimulationScenario, generate_dataset, ise,
                       rmse_scores, run_replicates)
from .splines import SplineBasis, build_basis, design_matrix, evaluation_grid

__all__ = [
    "ColumnConfig", "FunctionalDataset", "load_long_csv", "validate",
    "RawFit", "elbo", "fit_mfvb", "fit_vmp",
    "Hyperparameters",
    "OrthonormalizedFit", "align_signs", "h_inner", "orthonormalize",
    "predict_trajectory", "pve",
    "SelectionConfig", "model_choice", "rule_of_thumb_K", "select_L_pve",
    "GroundTruth", "SimulationScenario", "generate_dataset", "ise",
    "rmse_scores", "run_replicates",
    "SplineBasis", "build_basis", "design_matrix", "evaluation_grid",
    "__version__",
]
