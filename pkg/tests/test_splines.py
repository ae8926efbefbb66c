import numpy as np
import pytest

from mfpca.errors import ConfigurationError
from mfpca.splines import (SplineBasis, _penalty_matrix, build_basis, design_matrix,
                           evaluation_grid, raw_bspline_design)


def test_shape_contract():
    basis = build_basis(7)
    z = basis.evaluate(np.array([0.0, 1.0]))
    assert z.shape == (2, 7)
    assert np.all(np.isfinite(z))
    d = design_matrix(basis, np.linspace(0, 1, 11))
    assert d.shape == (11, 9)


def test_constant_exactly_representable():
    basis = build_basis(6)
    t = np.linspace(0, 1, 60)
    c = design_matrix(basis, t)
    y = np.full(60, 2.5)
    coef, *_ = np.linalg.lstsq(c, y, rcond=None)
    assert np.max(np.abs(c @ coef - y)) < 1e-10


def test_sine_least_squares_oracle():
    basis = build_basis(15)
    t = np.linspace(0, 1, 200)
    c = design_matrix(basis, t)
    y = np.sin(2 * np.pi * t)
    coef, *_ = np.linalg.lstsq(c, y, rcond=None)
    assert np.max(np.abs(c @ coef - y)) < 1e-3


def test_design_matrix_leading_columns():
    basis = build_basis(5)
    d = design_matrix(basis, np.array([0.0, 1.0]))
    assert np.array_equal(d[:, 0], [1.0, 1.0])
    assert np.array_equal(d[:, 1], [0.0, 1.0])


def test_design_matrix_empty_times():
    basis = build_basis(5)
    d = design_matrix(basis, np.array([]))
    assert d.shape == (0, 7)


def test_design_matrix_deterministic():
    basis = build_basis(9)
    t = np.random.default_rng(5).uniform(size=50)
    a = design_matrix(basis, t)
    b = design_matrix(basis, t)
    assert np.array_equal(a, b)


def test_basis_construction_reproducible():
    a = build_basis(8)
    b = build_basis(8)
    assert np.array_equal(a.transform, b.transform)
    assert np.array_equal(a.interior_knots, b.interior_knots)


def test_domain_error():
    basis = build_basis(5)
    with pytest.raises(ValueError):
        design_matrix(basis, np.array([0.5, 1.2]))
    with pytest.raises(ValueError):
        design_matrix(basis, np.array([-0.1]))


def test_minimum_splines_rejected():
    with pytest.raises(ConfigurationError):
        build_basis(3)


def test_evaluation_grid_small():
    basis = build_basis(5)
    grid = evaluation_grid(basis, 3)
    assert np.allclose(grid.times, [0.0, 0.5, 1.0])


def test_evaluation_grid_uniform_spacing():
    basis = build_basis(5)
    grid = evaluation_grid(basis, 1000)
    gaps = np.diff(grid.times)
    assert np.allclose(gaps, 1.0 / 999.0)
    assert grid.times[0] == 0.0 and grid.times[-1] == 1.0


def test_evaluation_grid_matches_pointwise():
    basis = build_basis(7)
    grid = evaluation_grid(basis, 37)
    again = np.column_stack([np.ones(37), grid.times, basis.evaluate(grid.times)])
    assert np.array_equal(grid.design, again)


def test_grid_size_validation():
    basis = build_basis(5)
    with pytest.raises(ConfigurationError):
        evaluation_grid(basis, 1)


@pytest.mark.parametrize("num_splines", [4, 7, 15])
def test_null_space_orthogonality(num_splines):
    basis = build_basis(num_splines)
    t = np.linspace(0, 1, 2001)
    z = basis.evaluate(t)
    w = np.zeros_like(t)
    dt = np.diff(t)
    w[:-1] += dt / 2
    w[1:] += dt / 2
    assert np.max(np.abs(w @ z)) < 1e-6
    assert np.max(np.abs((w * t) @ z)) < 1e-6


@pytest.mark.parametrize("num_splines", [4, 8, 12])
def test_penalty_becomes_identity(num_splines):
    basis = build_basis(num_splines)
    omega = _penalty_matrix(basis.knot_vector, len(basis.knot_vector) - 4)
    gram = basis.transform.T @ omega @ basis.transform
    assert np.max(np.abs(gram - np.eye(num_splines))) < 1e-10


def test_transform_full_column_rank():
    basis = build_basis(10)
    assert np.linalg.matrix_rank(basis.transform) == 10


def test_raw_bspline_design_partition_of_unity():
    t = np.linspace(0, 1, 101)
    d = raw_bspline_design(t, 8)
    assert d.shape == (101, 8)
    assert np.allclose(d.sum(axis=1), 1.0)
