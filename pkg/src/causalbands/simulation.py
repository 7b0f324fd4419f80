"""Two-way clustered data-generating processes and coverage experiments.

Both designs build every primitive (covariates, noise, treatment shocks) from
a weighted sum of a cell-level, a row-level, and a column-level component, so
cells sharing an index are dependent and cells sharing none are independent.

Treatment assignment in the binary design compares a logistic index against a
threshold. The default threshold is an iid uniform draw, which makes the true
propensity exactly logistic in the index and keeps both arms populated at
small sample sizes; ``treatment_noise="clustered_normal"`` instead uses the
two-way normal shock (optionally recentered), which induces cluster-correlated
assignment but a severely unbalanced design when centered at zero.
"""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit
from scipy.stats import beta as beta_dist

from .bootstrap import (
    IID_BOOT,
    MULTIWAY_BOOT,
    POINTWISE_GAUSSIAN,
    iid_band,
    pointwise_band,
    uniform_band,
)
from .data import Mode, TwoWaySample, quantile_grid
from .errors import CausalBandsError, InvalidCorrelation
from .estimator import (
    blockwise_variant,
    cluster_covariance,
    fit_cross_fitted,
    fit_full_sample,
    iid_covariance,
)
from .nuisance import NuisanceConfig
from .rng import derive_seed, keyed_generator
from .sieve import basis_for_values

FULL_SAMPLE = "full_sample"
CROSS_FIT = "cross_fit"
POINTWISE = "pointwise"

_METHOD_ORDER = (POINTWISE, IID_BOOT, MULTIWAY_BOOT)
_ESTIMATOR_ORDER = (FULL_SAMPLE, CROSS_FIT)

SHAPES = {
    "x": lambda x: x,
    "logistic_x": lambda x: expit(x),
    "logistic_3x": lambda x: expit(3.0 * x),
    "cos": np.cos,
    "sin": np.sin,
    "sin_plus_cos": lambda x: np.sin(x) + np.cos(x),
}


def _check_weights(weights: tuple[float, float], name: str) -> None:
    r1, r2 = weights
    if r1 < 0 or r2 < 0 or r1 + r2 > 1:
        raise ValueError(f"{name} weights must be nonnegative with r1 + r2 <= 1, got {weights}")


def _power_covariance(dim: int, rho: float) -> np.ndarray:
    if not -1.0 < rho < 1.0:
        raise InvalidCorrelation(f"correlation must lie in (-1, 1), got {rho}")
    idx = np.arange(dim)
    return rho ** np.abs(np.subtract.outer(idx, idx))


def gen_two_way_components(
    n_rows: int,
    n_cols: int,
    dim: int,
    rho: float,
    weights: tuple[float, float],
    seed: int,
) -> np.ndarray:
    """(N, M, dim) array combining independent cell, row, and column draws.

    Each component vector is N(0, C) with C[s, t] = rho^|s - t|; the output is
    (1 - r1 - r2) * cell + r1 * row + r2 * column.
    """
    _check_weights(weights, "component")
    chol = np.linalg.cholesky(_power_covariance(dim, rho))
    rng = keyed_generator(seed)
    a_row = rng.standard_normal((n_rows, dim)) @ chol.T
    a_col = rng.standard_normal((n_cols, dim)) @ chol.T
    a_cell = rng.standard_normal((n_rows, n_cols, dim)) @ chol.T
    r1, r2 = weights
    return (1.0 - r1 - r2) * a_cell + r1 * a_row[:, None, :] + r2 * a_col[None, :, :]


def _default_zeta(dim: int) -> tuple[float, ...]:
    return tuple(0.7 ** k for k in range(1, dim + 1))


def _default_gamma(dim: int) -> tuple[float, ...]:
    return tuple(0.5 ** k for k in range(1, dim + 1))


@dataclass(frozen=True)
class DgpConfigCATE:
    """Binary-treatment design with two-way clustered primitives."""

    n_rows: int = 25
    n_cols: int = 25
    dim: int = 4
    rho: float = 0.25
    weights_w: tuple[float, float] = (0.4, 0.4)
    weights_eps: tuple[float, float] = (0.4, 0.4)
    weights_v: tuple[float, float] = (0.4, 0.4)
    mu1: str = "x"
    zeta: tuple[float, ...] | None = None
    component_noise: float = 0.1
    noise_is_variance: bool = True
    treatment_noise: str = "uniform"  # or "clustered_normal"
    treatment_noise_center: float = 0.0
    standardize_covariates: bool = False

    def __post_init__(self):
        for name in ("weights_w", "weights_eps", "weights_v"):
            _check_weights(getattr(self, name), name)
        if self.mu1 not in SHAPES:
            raise ValueError(f"unknown shape {self.mu1!r}; options: {sorted(SHAPES)}")
        if self.treatment_noise not in ("uniform", "clustered_normal"):
            raise ValueError("treatment_noise must be 'uniform' or 'clustered_normal'")
        if self.zeta is None:
            object.__setattr__(self, "zeta", _default_zeta(self.dim))

    @property
    def noise_sd(self) -> float:
        return float(np.sqrt(self.component_noise)) if self.noise_is_variance else float(self.component_noise)


@dataclass(frozen=True)
class DgpConfigCTE:
    """Continuous-dose design: the dose is beta-distributed given covariates."""

    n_rows: int = 25
    n_cols: int = 25
    dim: int = 4
    rho: float = 0.25
    weights_w: tuple[float, float] = (0.4, 0.4)
    weights_eps: tuple[float, float] = (0.4, 0.4)
    g: str = "x"
    gamma: tuple[float, ...] | None = None
    zeta: tuple[float, ...] | None = None
    component_noise: float = 0.1
    noise_is_variance: bool = True
    standardize_covariates: bool = False

    def __post_init__(self):
        for name in ("weights_w", "weights_eps"):
            _check_weights(getattr(self, name), name)
        if self.g not in SHAPES:
            raise ValueError(f"unknown shape {self.g!r}; options: {sorted(SHAPES)}")
        if self.zeta is None:
            object.__setattr__(self, "zeta", _default_zeta(self.dim))
        if self.gamma is None:
            object.__setattr__(self, "gamma", _default_gamma(self.dim))

    @property
    def noise_sd(self) -> float:
        return float(np.sqrt(self.component_noise)) if self.noise_is_variance else float(self.component_noise)


def _covariate_scale(weights: tuple[float, float]) -> float:
    r1, r2 = weights
    return float(np.sqrt((1.0 - r1 - r2) ** 2 + r1**2 + r2**2))


def _draw_covariates(cfg, seed: int) -> np.ndarray:
    w = gen_two_way_components(cfg.n_rows, cfg.n_cols, cfg.dim, cfg.rho, cfg.weights_w,
                               derive_seed(seed, 1))
    if cfg.standardize_covariates:
        w = w / _covariate_scale(cfg.weights_w)
    return w


def _draw_noise(cfg, seed: int, tag: int, weights) -> np.ndarray:
    comp = gen_two_way_components(cfg.n_rows, cfg.n_cols, 1, 0.0, weights, derive_seed(seed, tag))
    return comp[:, :, 0] * cfg.noise_sd


def simulate_cate(cfg: DgpConfigCATE, seed: int) -> tuple[TwoWaySample, object]:
    """Draw one binary-treatment sample; returns (sample, true tau function).

    Potential outcomes are mu1(x) + eps under treatment and x + eps under
    control, x being the first covariate coordinate, so tau(x) = mu1(x) - x.
    """
    w = _draw_covariates(cfg, seed)
    eps = _draw_noise(cfg, seed, 2, cfg.weights_eps)
    index = w @ np.asarray(cfg.zeta)
    lam = expit(index)
    if cfg.treatment_noise == "uniform":
        thresh = keyed_generator(derive_seed(seed, 3)).uniform(size=lam.shape)
    else:
        thresh = cfg.treatment_noise_center + _draw_noise(cfg, seed, 3, cfg.weights_v)
    d = (lam >= thresh).astype(float)
    x = w[:, :, 0]
    mu1 = SHAPES[cfg.mu1]
    y1 = mu1(x) + eps
    y0 = x + eps
    y = d * y1 + (1.0 - d) * y0
    sample = TwoWaySample(outcomes=y, treatments=d, covariates=w, mode=Mode.CATE, x_coord=0)

    def tau(xs):
        xs = np.asarray(xs, dtype=float)
        return mu1(xs) - xs

    return sample, tau


def true_propensity(cfg: DgpConfigCATE):
    """Closed-form P(D = 1 | W = w) implied by the configured design."""
    zeta = np.asarray(cfg.zeta)
    if cfg.treatment_noise == "uniform":
        return lambda w: expit(np.atleast_2d(w) @ zeta)
    r1, r2 = cfg.weights_v
    sd = cfg.noise_sd * _covariate_scale(cfg.weights_v)
    center = cfg.treatment_noise_center
    from scipy.special import ndtr

    return lambda w: ndtr((expit(np.atleast_2d(w) @ zeta) - center) / sd)


def simulate_cte(cfg: DgpConfigCTE, seed: int) -> tuple[TwoWaySample, object]:
    """Draw one continuous-dose sample; returns (sample, true tau function).

    The dose is beta(lam, 1 - lam) given covariates with lam the logistic
    index, and Y = g(X) + W gamma + eps. Covariate components are mean zero,
    so the population dose-response function is g itself (convention recorded
    in the returned closure).
    """
    w = _draw_covariates(cfg, seed)
    eps = _draw_noise(cfg, seed, 2, cfg.weights_eps)
    lam = expit(w @ np.asarray(cfg.zeta))
    a = np.clip(lam, 1e-6, 1.0 - 1e-6)
    b = np.clip(1.0 - lam, 1e-6, 1.0 - 1e-6)
    if np.any(a != lam) or np.any(b != 1.0 - lam):
        warnings.warn("beta shape parameters clamped away from {0, 1}", stacklevel=2)
    x = keyed_generator(derive_seed(seed, 4)).beta(a, b)
    g = SHAPES[cfg.g]
    y = g(x) + w @ np.asarray(cfg.gamma) + eps
    sample = TwoWaySample(outcomes=y, treatments=x, covariates=w, mode=Mode.CTE)

    def tau(xs):
        return np.asarray(g(np.asarray(xs, dtype=float)))

    return sample, tau


def true_dose_density(cfg: DgpConfigCTE):
    """Closed-form f(x | w) for the beta dose design."""
    zeta = np.asarray(cfg.zeta)

    def density(xs, ws):
        lam = expit(np.atleast_2d(ws) @ zeta)
        a = np.clip(lam, 1e-6, 1.0 - 1e-6)
        return beta_dist.pdf(np.asarray(xs, dtype=float), a, 1.0 - a)

    return density


# --- coverage experiments ---------------------------------------------------


@dataclass(frozen=True)
class EstimatorConfig:
    """Which estimators, band methods, and tuning to use in experiments."""

    estimators: tuple[str, ...] = (CROSS_FIT,)
    methods: tuple[str, ...] = (POINTWISE, IID_BOOT, MULTIWAY_BOOT)
    k_folds: int = 2
    basis_family: str = "polynomial"
    basis_dimension: int = 4
    basis_degree: int = 3
    nuisance: NuisanceConfig = field(default_factory=NuisanceConfig)
    band_variance_mode: str = "pooled"  # or "blockwise"
    crossfit_gram: str = "pooled"       # or "per_block"

    def __post_init__(self):
        for est in self.estimators:
            if est not in _ESTIMATOR_ORDER:
                raise ValueError(f"unknown estimator {est!r}")
        for m in self.methods:
            if m not in _METHOD_ORDER:
                raise ValueError(f"unknown band method {m!r}")
        if self.band_variance_mode not in ("pooled", "blockwise"):
            raise ValueError("band_variance_mode must be 'pooled' or 'blockwise'")
        if self.crossfit_gram not in ("pooled", "per_block"):
            raise ValueError("crossfit_gram must be 'pooled' or 'per_block'")


@dataclass
class CoverageReport:
    """Uniform-coverage rates per estimator and band method."""

    replications: int
    completed: int
    rates: dict
    mc_se: dict
    failures: list
    config: dict
    seed: int
    runtime_seconds: float = 0.0

    def to_json_dict(self) -> dict:
        # runtime_seconds is intentionally excluded: reports from identical
        # configurations and seeds must be byte-identical.
        return {
            "replications": self.replications,
            "completed": self.completed,
            "rates": self.rates,
            "mc_se": self.mc_se,
            "failures": self.failures,
            "config": self.config,
            "seed": self.seed,
        }

    def to_tsv_lines(self, shape: str) -> list[str]:
        pairs = [(est, m) for est in _ESTIMATOR_ORDER if est in self.rates
                 for m in _METHOD_ORDER if m in self.rates[est]]
        header = "shape\t" + "\t".join(f"{est}:{m}" for est, m in pairs)
        row = shape + "\t" + "\t".join(f"{self.rates[est][m]:.4f}" for est, m in pairs)
        return [header, row]


def _simulate_for(dgp, seed: int):
    if isinstance(dgp, DgpConfigCATE):
        return simulate_cate(dgp, seed)
    return simulate_cte(dgp, seed)


_EST_STREAM = {FULL_SAMPLE: 11, CROSS_FIT: 12}
_METHOD_STREAM = {IID_BOOT: 21, MULTIWAY_BOOT: 22}


def coverage_replication(
    rep: int,
    dgp,
    est_cfg: EstimatorConfig,
    draws: int,
    alpha: float,
    grid_lo: float,
    grid_hi: float,
    grid_count: int,
    seed: int,
) -> dict:
    """One replication: simulate, fit, build bands, record uniform coverage."""
    sample, tau_fn = _simulate_for(dgp, derive_seed(seed, rep, 1))
    grid = quantile_grid(sample.conditioning_values.ravel(), grid_lo, grid_hi, grid_count)
    tau0 = np.asarray(tau_fn(grid.points), dtype=float)
    basis = basis_for_values(est_cfg.basis_family, est_cfg.basis_dimension,
                             sample.conditioning_values.ravel(), degree=est_cfg.basis_degree)
    covered: dict = {}
    for est in est_cfg.estimators:
        if est == FULL_SAMPLE:
            fit = fit_full_sample(sample, basis, est_cfg.nuisance)
            cov = cluster_covariance(fit)
        else:
            result = fit_cross_fitted(sample, basis, est_cfg.nuisance, est_cfg.k_folds,
                                      derive_seed(seed, rep, 2),
                                      gram_mode=est_cfg.crossfit_gram)
            if est_cfg.band_variance_mode == "blockwise":
                fit, cov = blockwise_variant(result)
            else:
                fit = result.averaged
                cov = cluster_covariance(fit)
        covered[est] = {}
        for method in est_cfg.methods:
            if method == POINTWISE:
                # The conventional benchmark interval: Gaussian critical value
                # on the independence-based variance.
                band = pointwise_band(fit, iid_covariance(fit), grid, alpha)
            elif method == MULTIWAY_BOOT:
                boot_seed = derive_seed(seed, rep, _EST_STREAM[est], _METHOD_STREAM[method])
                band = uniform_band(fit, cov, grid, alpha, draws, boot_seed)
            else:
                boot_seed = derive_seed(seed, rep, _EST_STREAM[est], _METHOD_STREAM[method])
                band = iid_band(fit, iid_covariance(fit), grid, alpha, draws, boot_seed)
            covered[est][method] = band.covers(tau0)
    return covered


def _replication_worker(args) -> dict:
    rep = args[0]
    try:
        return {"rep": rep, "covered": coverage_replication(*args)}
    except CausalBandsError as exc:
        return {"rep": rep, "error": f"{type(exc).__name__}: {exc}"}


def run_coverage(
    dgp,
    est_cfg: EstimatorConfig,
    replications: int,
    draws: int,
    alpha: float,
    grid_lo: float,
    grid_hi: float,
    grid_count: int,
    seed: int,
    workers: int = 1,
    skip_failures: bool = False,
    config_echo: dict | None = None,
) -> CoverageReport:
    """Replicated uniform-coverage experiment.

    Success for (estimator, method) in one replication means the band
    contains the true function at every grid point. Replications use streams
    keyed (seed, replication), so the report is deterministic for any worker
    count; a failing replication aborts the run unless ``skip_failures``.
    """
    if replications < 1:
        raise ValueError("need at least one replication")
    t0 = time.perf_counter()
    payloads = [(rep, dgp, est_cfg, draws, alpha, grid_lo, grid_hi, grid_count, seed)
                for rep in range(replications)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replication_worker, payloads,
                                    chunksize=max(1, replications // (8 * workers))))
    else:
        results = [_replication_worker(p) for p in payloads]

    failures = [{"rep": r["rep"], "error": r["error"]} for r in results if "error" in r]
    if failures and not skip_failures:
        raise CausalBandsError(
            f"replication {failures[0]['rep']} failed: {failures[0]['error']} "
            f"(set skip_failures to drop failing replications)"
        )
    completed = [r for r in results if "covered" in r]
    if not completed:
        raise CausalBandsError("all replications failed")

    rates: dict = {}
    mc_se: dict = {}
    denom = len(completed)
    for est in est_cfg.estimators:
        rates[est] = {}
        mc_se[est] = {}
        for method in est_cfg.methods:
            hits = sum(1 for r in completed if r["covered"][est][method])
            rate = hits / denom
            rates[est][method] = rate
            mc_se[est][method] = float(np.sqrt(rate * (1.0 - rate) / denom))
    return CoverageReport(
        replications=replications,
        completed=denom,
        rates=rates,
        mc_se=mc_se,
        failures=failures,
        config=config_echo or {},
        seed=seed,
        runtime_seconds=time.perf_counter() - t0,
    )
