from __future__ import annotations

import numpy as np
import pytest

from causalbands.errors import RankDeficiencyRisk, SingularGram
from causalbands.estimator import fit_full_sample
from causalbands.sieve import (
    BasisFamily,
    BasisSpec,
    GramMatrix,
    basis_for_values,
    basis_matrix,
    basis_sup_norm,
    evaluate_basis,
    gram_matrix,
    solve_least_squares,
)

from conftest import make_sample
from oracles import gram_by_double_loop, solve_by_elimination

RAW = BasisSpec(BasisFamily.POLYNOMIAL, 2, (-1.0, 1.0))  # identity rescale


def test_polynomial_center_and_boundary():
    spec = BasisSpec(BasisFamily.POLYNOMIAL, 3, (-1.0, 1.0))
    np.testing.assert_allclose(evaluate_basis(spec, 0.0), [1.0, 0.0, 0.0])
    np.testing.assert_allclose(evaluate_basis(spec, 1.0), [1.0, 1.0, 1.0])


def test_polynomial_clamps_out_of_domain():
    spec = BasisSpec(BasisFamily.POLYNOMIAL, 3, (0.0, 2.0))
    np.testing.assert_allclose(evaluate_basis(spec, 99.0), evaluate_basis(spec, 2.0))


def test_bspline_partition_of_unity(rng):
    values = rng.uniform(-2.0, 3.0, 500)
    spec = basis_for_values(BasisFamily.BSPLINE, 7, values, degree=3)
    xs = rng.uniform(-2.0, 3.0, 1000)
    b = basis_matrix(spec, xs)
    assert np.all(b >= 0.0)
    np.testing.assert_allclose(b.sum(axis=1), 1.0, atol=1e-12)


def test_gram_two_point_average():
    q = gram_matrix(RAW, np.array([0.0, 1.0]))
    np.testing.assert_allclose(q.matrix, [[1.0, 0.5], [0.5, 0.5]])
    assert q.sample_size == 2


def test_gram_degenerate_support():
    spec = BasisSpec(BasisFamily.POLYNOMIAL, 3, (-1.0, 1.0))
    c = 0.4
    q = gram_matrix(spec, np.full(5, c))
    px = evaluate_basis(spec, c)
    np.testing.assert_allclose(q.matrix, np.outer(px, px), atol=1e-15)


def test_gram_matches_double_loop_oracle(rng):
    spec = BasisSpec(BasisFamily.POLYNOMIAL, 4, (-2.0, 2.0))
    values = rng.uniform(-2.0, 2.0, 60)
    q = gram_matrix(spec, values)
    oracle = gram_by_double_loop(basis_matrix(spec, values))
    np.testing.assert_allclose(q.matrix, oracle, rtol=1e-12)


def test_gram_warns_on_rank_deficiency_risk():
    spec = BasisSpec(BasisFamily.POLYNOMIAL, 4, (-1.0, 1.0))
    with pytest.warns(RankDeficiencyRisk):
        gram_matrix(spec, np.array([0.1, 0.2]))


def test_solve_identity_system():
    q = GramMatrix(matrix=np.eye(3), sample_size=10)
    m = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(solve_least_squares(q, m, 0.0), m)


def test_solve_diagonal_system():
    q = GramMatrix(matrix=np.diag([2.0, 4.0]), sample_size=10)
    np.testing.assert_allclose(solve_least_squares(q, np.array([2.0, 8.0]), 0.0), [1.0, 2.0])


def test_solve_matches_elimination_oracle(rng):
    a = rng.standard_normal((5, 5))
    q = GramMatrix(matrix=a @ a.T + 5.0 * np.eye(5), sample_size=50)
    m = rng.standard_normal(5)
    beta = solve_least_squares(q, m, 0.0)
    oracle = solve_by_elimination(q.matrix, m)
    np.testing.assert_allclose(beta, oracle, rtol=1e-10)
    assert np.linalg.norm(q.matrix @ beta - m) <= 1e-8 * np.linalg.norm(m)


def test_solve_singular_raises_then_ridge_succeeds():
    q = GramMatrix(matrix=np.array([[1.0, 1.0], [1.0, 1.0]]), sample_size=10)
    with pytest.raises(SingularGram):
        solve_least_squares(q, np.array([1.0, 1.0]), 0.0)
    beta = solve_least_squares(q, np.array([1.0, 1.0]), 1e-6)
    assert np.all(np.isfinite(beta))


def test_exact_interpolation_recovers_beta(rng):
    sample = make_sample(8, 9, seed=4)
    spec = basis_for_values(BasisFamily.POLYNOMIAL, 3, sample.conditioning_values.ravel())
    beta_star = np.array([0.5, -1.0, 2.0])
    signals = (basis_matrix(spec, sample.conditioning_values.ravel()) @ beta_star).reshape(8, 9)
    fit = fit_full_sample(sample, spec, signals=signals)
    np.testing.assert_allclose(fit.beta, beta_star, rtol=1e-8)


def test_normal_equation_orthogonality(rng):
    sample = make_sample(10, 11, seed=5)
    spec = basis_for_values(BasisFamily.POLYNOMIAL, 4, sample.conditioning_values.ravel())
    signals = rng.standard_normal((10, 11))
    fit = fit_full_sample(sample, spec, signals=signals)
    design = fit.cell_basis.reshape(-1, 4)
    moment = design.T @ fit.residuals.ravel() / design.shape[0]
    assert np.abs(moment).max() <= 1e-8 * np.abs(signals).max()


def test_gram_psd_on_random_samples(rng):
    for _ in range(20):
        spec = BasisSpec(BasisFamily.POLYNOMIAL, 4, (-1.5, 1.5))
        values = rng.uniform(-1.5, 1.5, rng.integers(4, 40))
        q = gram_matrix(spec, values).matrix
        eigs = np.linalg.eigvalsh(q)
        assert eigs.min() >= -1e-10 * np.linalg.norm(q)


def test_sup_norm_positive():
    spec = BasisSpec(BasisFamily.POLYNOMIAL, 4, (-1.0, 1.0))
    assert basis_sup_norm(spec) == pytest.approx(2.0, rel=1e-6)
