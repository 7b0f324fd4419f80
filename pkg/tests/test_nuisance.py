from __future__ import annotations

import numpy as np
import pytest
from scipy.special import expit

from causalbands.data import Mode, TwoWaySample
from causalbands.errors import DegenerateTreatment, InsufficientArmData
from causalbands.nuisance import (
    CondDensityModel,
    NuisanceConfig,
    fit_conditional_density,
    fit_nuisances,
    fit_outcome_arm,
    fit_propensity,
    kernel_weight,
    marginal_density,
)
from causalbands.rng import keyed_generator
from causalbands.simulation import DgpConfigCATE, simulate_cate

from conftest import make_sample
from oracles import solve_by_elimination

SQRT_2PI = np.sqrt(2.0 * np.pi)


def _flat_view(y, t, w, mode=Mode.CATE):
    n = int(np.ceil(np.sqrt(len(y))))
    # Build a throwaway sample-backed view by padding into a grid is overkill;
    # construct the view dataclass directly.
    from causalbands.data import SubsampleView

    return SubsampleView(
        outcomes=np.asarray(y, dtype=float),
        treatments=np.asarray(t, dtype=float),
        covariates=np.atleast_2d(np.asarray(w, dtype=float)),
        conditioning=np.asarray(w, dtype=float)[:, 0] if mode == Mode.CATE else np.asarray(t, dtype=float),
        rows=np.arange(n),
        cols=np.arange(n),
        mode=mode,
    )


def test_propensity_independent_treatment(rng):
    n = 10_000
    w = rng.standard_normal((n, 3))
    d = (rng.uniform(size=n) < 0.5).astype(float)
    model = fit_propensity(_flat_view(np.zeros(n), d, w), trim=0.01)
    assert model.converged
    assert abs(model.coefficients[0]) < 0.1
    assert np.abs(model.coefficients[1:]).max() < 0.1
    assert abs(model.predict(w).mean() - 0.5) < 0.02


def test_propensity_separation_flagged_without_overflow(rng):
    w = np.concatenate([np.full(30, -1.0), np.full(30, 1.0)])[:, None]
    d = (w[:, 0] > 0).astype(float)
    model = fit_propensity(_flat_view(np.zeros(60), d, w), trim=0.01, max_iter=50)
    assert not model.converged
    assert np.all(np.isfinite(model.coefficients))
    preds = model.predict(w)
    assert np.all((preds >= 0.01) & (preds <= 0.99))


def test_propensity_recovers_logistic_index():
    # Treatment drawn from a logistic propensity: repeated fits should center
    # on the generating coefficients.
    cfg = DgpConfigCATE(n_rows=100, n_cols=100, treatment_noise="uniform")
    zeta = np.asarray(cfg.zeta)
    reps = 24
    estimates = np.empty((reps, zeta.size))
    for r in range(reps):
        sample, _ = simulate_cate(cfg, seed=1000 + r)
        view = sample.view()
        model = fit_propensity(view, trim=0.001)
        estimates[r] = model.coefficients[1:]
    mean = estimates.mean(axis=0)
    mc_se = estimates.std(axis=0, ddof=1) / np.sqrt(reps)
    assert np.all(np.abs(mean - zeta) <= 3.0 * mc_se)


def test_propensity_degenerate_single_arm(rng):
    w = rng.standard_normal((20, 2))
    with pytest.raises(DegenerateTreatment):
        fit_propensity(_flat_view(np.zeros(20), np.ones(20), w), trim=0.01)


def test_propensity_trimming_fuzz(rng):
    w = rng.standard_normal((200, 2))
    d = (rng.uniform(size=200) < expit(3 * w[:, 0])).astype(float)
    model = fit_propensity(_flat_view(np.zeros(200), d, w), trim=0.05)
    probe = rng.standard_normal((100_000, 2)) * 50.0
    preds = model.predict(probe)
    assert preds.min() >= 0.05 and preds.max() <= 0.95


def test_outcome_arm_exact_linear(rng):
    w = rng.standard_normal((40, 3))
    y = 2.0 + 3.0 * w[:, 0]
    d = np.ones(40)
    model = fit_outcome_arm(_flat_view(y, d, w), arm=1, ridge=0.0)
    np.testing.assert_allclose(model.coefficients, [2.0, 3.0, 0.0, 0.0], atol=1e-10)


def test_outcome_arm_constant(rng):
    w = rng.standard_normal((30, 2))
    model = fit_outcome_arm(_flat_view(np.full(30, 7.5), np.zeros(30), w), arm=0, ridge=0.0)
    np.testing.assert_allclose(model.coefficients, [7.5, 0.0, 0.0], atol=1e-10)


def test_outcome_arm_matches_normal_equation_oracle(rng):
    w = rng.standard_normal((50, 3))
    y = rng.standard_normal(50)
    model = fit_outcome_arm(_flat_view(y, np.ones(50), w), arm=1, ridge=0.0)
    f = np.column_stack([np.ones(50), w])
    oracle = solve_by_elimination(f.T @ f, f.T @ y)
    np.testing.assert_allclose(model.coefficients, oracle, rtol=1e-10)


def test_outcome_arm_insufficient():
    w = np.random.default_rng(0).standard_normal((10, 3))
    d = np.zeros(10)
    d[:3] = 1.0
    with pytest.raises(InsufficientArmData):
        fit_outcome_arm(_flat_view(np.zeros(10), d, w), arm=1, ridge=0.0)


def test_outcome_ridge_shrinks_slopes(rng):
    w = rng.standard_normal((60, 2))
    y = 1.0 + w @ np.array([2.0, -1.0]) + rng.standard_normal(60)
    view = _flat_view(y, np.ones(60), w)
    free = fit_outcome_arm(view, arm=1, ridge=0.0)
    heavy = fit_outcome_arm(view, arm=1, ridge=1e6)
    assert np.abs(heavy.coefficients[1:]).max() <= 1e-3 * np.abs(free.coefficients[1:]).max()


def test_density_single_training_point():
    model = CondDensityModel(
        train_x=np.array([0.3]), train_w=np.array([[0.5, -0.2]]),
        bandwidth_x=0.2, bandwidth_w=np.array([0.3, 0.3]), kernel="gaussian", floor=0.01,
    )
    got = model.density(0.3, np.array([0.5, -0.2]))
    assert got == pytest.approx(1.0 / (0.2 * SQRT_2PI), rel=1e-12)


def test_density_uniform_dose(rng):
    n = 10_000
    x = rng.uniform(size=n)
    w = rng.standard_normal((n, 2))
    view = _flat_view(np.zeros(n), x, w, mode=Mode.CTE)
    model = fit_conditional_density(view, floor=0.01)
    val = model.density(0.5, np.array([0.0, 0.0]))
    assert abs(val - 1.0) < 0.15


def test_density_floor_far_from_support(rng):
    x = rng.uniform(size=50)
    w = rng.standard_normal((50, 2))
    model = fit_conditional_density(_flat_view(np.zeros(50), x, w, mode=Mode.CTE), floor=0.07)
    assert model.density(500.0, np.array([0.0, 0.0])) == pytest.approx(0.07)


def test_density_always_at_least_floor(rng):
    x = rng.uniform(size=200)
    w = rng.standard_normal((200, 3))
    model = fit_conditional_density(_flat_view(np.zeros(200), x, w, mode=Mode.CTE), floor=0.05)
    qx = rng.uniform(-3, 3, 500)
    qw = rng.standard_normal((500, 3)) * 4
    assert model.density_pairs(qx, qw).min() >= 0.05


def test_density_smooth_in_dose(rng):
    x = rng.uniform(size=400)
    w = rng.standard_normal((400, 2))
    model = fit_conditional_density(_flat_view(np.zeros(400), x, w, mode=Mode.CTE), floor=0.01)
    grid = np.linspace(0.2, 0.8, 200)
    vals = model.density_pairs(grid, np.zeros((200, 2)))
    steps = np.abs(np.diff(vals))
    assert steps.max() < 0.2  # no jumps at this resolution


def test_marginal_density_singleton_average(rng):
    x = rng.uniform(size=60)
    w = rng.standard_normal((60, 2))
    model = fit_conditional_density(_flat_view(np.zeros(60), x, w, mode=Mode.CTE), floor=0.01)
    w1 = np.array([0.3, -0.7])
    assert marginal_density(model, w1[None, :], 0.4) == pytest.approx(
        model.density(0.4, w1), rel=1e-12
    )


def test_marginal_density_uniform_dose(rng):
    n = 10_000
    x = rng.uniform(size=n)
    w = rng.standard_normal((n, 2))
    model = fit_conditional_density(_flat_view(np.zeros(n), x, w, mode=Mode.CTE), floor=0.01)
    omega = marginal_density(model, w[:500], 0.5)
    assert abs(omega - 1.0) < 0.15


def test_epanechnikov_kernel_weight():
    assert kernel_weight(np.array([0.0]), 0.5, "epanechnikov")[0] == pytest.approx(1.5)
    assert kernel_weight(np.array([0.6]), 0.5, "epanechnikov")[0] == 0.0


def test_subsample_discipline_nan_poison():
    # Nuisances fitted on the complement view must never read block cells:
    # poison the block with NaN and check the fitted pieces stay finite.
    sample = make_sample(8, 8, d=2, seed=3)
    y = sample.outcomes.copy()
    t = sample.treatments.copy()
    w = sample.covariates.copy()
    block_rows, block_cols = np.array([0, 1, 2]), np.array([4, 5])
    y[np.ix_(block_rows, block_cols)] = np.nan
    w[np.ix_(block_rows, block_cols)] = np.nan
    poisoned = TwoWaySample(outcomes=y, treatments=t, covariates=w, mode=Mode.CATE)
    comp_rows = np.setdiff1d(np.arange(8), block_rows)
    comp_cols = np.setdiff1d(np.arange(8), block_cols)
    fit = fit_nuisances(poisoned.view(comp_rows, comp_cols), NuisanceConfig())
    assert np.all(np.isfinite(fit.propensity.coefficients))
    assert np.all(np.isfinite(fit.outcome0.coefficients))
    assert np.all(np.isfinite(fit.outcome1.coefficients))
