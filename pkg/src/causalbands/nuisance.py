"""First-step nuisance learners.

CATE mode needs a propensity score and arm-wise outcome regressions; CTE mode
needs a conditional treatment density, an outcome surface, and the marginal
treatment density. The learners here (logistic regression, ridge regression,
Nadaraya-Watson kernel density) are deliberately simple and verifiable;
denominators are kept away from zero by trimming and flooring.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import expit

from .data import Mode, SubsampleView
from .errors import (
    DegenerateTreatment,
    InsufficientArmData,
    InsufficientData,
    SingularGram,
    SparseRegionWarning,
)

_SQRT_2PI = float(np.sqrt(2.0 * np.pi))
_PROB_CLIP = 1e-12


@dataclass(frozen=True)
class NuisanceConfig:
    """Tuning knobs for the first step."""

    trim: float = 0.01
    ridge: float = 0.0
    density_floor: float = 0.05
    bandwidth_rule: str = "silverman"  # or "fixed"
    bandwidth_x: float | None = None
    bandwidth_w: float | None = None
    kernel: str = "gaussian"
    cte_poly_order: int = 2
    max_iter: int = 100
    tol: float = 1e-8
    small_arm_fallback: bool = True

    def __post_init__(self):
        if not 0.0 < self.trim < 0.5:
            raise ValueError("trim must lie in (0, 0.5)")
        if self.density_floor <= 0.0:
            raise ValueError("density_floor must be positive")


@dataclass(frozen=True)
class PropensityModel:
    """Logistic propensity score with hard trimming."""

    coefficients: np.ndarray  # intercept first, length d + 1
    trim: float
    converged: bool = True
    n_iter: int = 0

    def predict(self, covariates: np.ndarray) -> np.ndarray:
        w = np.atleast_2d(np.asarray(covariates, dtype=float))
        eta = self.coefficients[0] + w @ self.coefficients[1:]
        return np.clip(expit(eta), self.trim, 1.0 - self.trim)


@dataclass(frozen=True)
class OutcomeModel:
    """Affine regression of the outcome, optionally polynomial in the dose."""

    arm: int | str  # 0, 1, or "continuous"
    coefficients: np.ndarray
    ridge: float
    poly_order: int = 0  # number of dose powers (continuous arm only)
    fallback: str | None = None

    def predict(self, covariates: np.ndarray) -> np.ndarray:
        w = np.atleast_2d(np.asarray(covariates, dtype=float))
        return self.coefficients[0] + w @ self.coefficients[1:]

    def predict_xw(self, doses: np.ndarray, covariates: np.ndarray) -> np.ndarray:
        f = _dose_features(np.asarray(doses, dtype=float).ravel(),
                           np.atleast_2d(np.asarray(covariates, dtype=float)),
                           self.poly_order)
        return f @ self.coefficients


def _dose_features(x: np.ndarray, w: np.ndarray, poly_order: int) -> np.ndarray:
    cols = [np.ones_like(x)] + [x ** k for k in range(1, poly_order + 1)] + [w]
    return np.column_stack(cols)


def fit_propensity(
    view: SubsampleView,
    trim: float,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> PropensityModel:
    """Logistic ML fit by iteratively reweighted least squares.

    Probabilities are clipped during fitting so perfectly separated data walk
    to the clipped boundary instead of overflowing; such fits are returned
    with ``converged=False``.
    """
    d = view.treatments.astype(float)
    if np.all(d == d[0]):
        raise DegenerateTreatment("subsample contains a single treatment arm")
    x = np.column_stack([np.ones(view.n_obs), view.covariates])
    beta = np.zeros(x.shape[1])
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = x @ beta
        mu = np.clip(expit(eta), _PROB_CLIP, 1.0 - _PROB_CLIP)
        wgt = mu * (1.0 - mu)
        z = eta + (d - mu) / wgt
        xw = x * wgt[:, None]
        a = x.T @ xw
        a[np.diag_indices_from(a)] += 1e-12 * (1.0 + np.trace(a))
        try:
            beta_new = scipy.linalg.solve(a, xw.T @ z, assume_a="pos")
        except (scipy.linalg.LinAlgError, np.linalg.LinAlgError):
            break
        step = float(np.max(np.abs(beta_new - beta)))
        beta = beta_new
        if step < tol:
            converged = True
            break
    return PropensityModel(coefficients=beta, trim=trim, converged=converged, n_iter=it)


def _ridge_solve(features: np.ndarray, y: np.ndarray, ridge: float) -> np.ndarray:
    # Intercept (first column) is never penalized.
    a = features.T @ features
    if ridge > 0:
        pen = ridge * np.eye(features.shape[1])
        pen[0, 0] = 0.0
        a = a + pen
    try:
        return scipy.linalg.solve(a, features.T @ y, assume_a="pos")
    except (scipy.linalg.LinAlgError, np.linalg.LinAlgError) as exc:
        raise SingularGram(f"outcome regression normal equations singular: {exc}") from None


def fit_outcome_arm(
    view: SubsampleView,
    arm: int | str,
    ridge: float = 0.0,
    poly_order: int = 2,
) -> OutcomeModel:
    """Ridge least squares of the outcome within one treatment arm.

    ``arm`` 0 or 1 regresses Y on (1, W) within that arm; ``"continuous"``
    regresses Y on (1, x, ..., x^poly_order, W) over the whole subsample.
    """
    if arm == "continuous":
        f = _dose_features(view.treatments, view.covariates, poly_order)
        if view.n_obs < f.shape[1] + 1:
            raise InsufficientArmData(
                f"{view.n_obs} observations for {f.shape[1]} regression coefficients"
            )
        coef = _ridge_solve(f, view.outcomes, ridge)
        return OutcomeModel(arm=arm, coefficients=coef, ridge=ridge, poly_order=poly_order)
    mask = view.treatments == float(arm)
    n_arm = int(mask.sum())
    d = view.covariates.shape[1]
    if n_arm < d + 2:
        raise InsufficientArmData(f"arm {arm} has {n_arm} observations, needs {d + 2}")
    f = np.column_stack([np.ones(n_arm), view.covariates[mask]])
    coef = _ridge_solve(f, view.outcomes[mask], ridge)
    return OutcomeModel(arm=int(arm), coefficients=coef, ridge=ridge)


def _joint_outcome_models(view: SubsampleView, ridge: float) -> tuple[OutcomeModel, OutcomeModel]:
    """Single regression on (1, D, W); arm models are its two sections.

    Used when an arm is too thin for a separate fit but not empty.
    """
    f = np.column_stack([np.ones(view.n_obs), view.treatments, view.covariates])
    coef = _ridge_solve(f, view.outcomes, ridge if ridge > 0 else 1e-10)
    models = []
    for arm in (0, 1):
        c = np.concatenate([[coef[0] + coef[1] * arm], coef[2:]])
        models.append(OutcomeModel(arm=arm, coefficients=c, ridge=ridge, fallback="joint"))
    return models[0], models[1]


# --- conditional density ---------------------------------------------------


def _kernel_profile(u: np.ndarray, kernel: str) -> np.ndarray:
    if kernel == "gaussian":
        return np.exp(-0.5 * u * u) / _SQRT_2PI
    if kernel == "epanechnikov":
        return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
    raise ValueError(f"unknown kernel {kernel!r}")


def kernel_weight(u: np.ndarray, h: float, kernel: str = "gaussian") -> np.ndarray:
    """Scaled kernel K_h(u) = k(u / h) / h."""
    return _kernel_profile(np.asarray(u, dtype=float) / h, kernel) / h


def silverman_bandwidth(values: np.ndarray) -> float:
    """1.06 * sd * n^(-1/5), guarded away from zero."""
    values = np.asarray(values, dtype=float).ravel()
    sd = float(values.std())
    if sd <= 0:
        sd = max(1e-3, 1e-3 * abs(float(values.mean())))
    return 1.06 * sd * values.size ** (-0.2)


@dataclass(frozen=True)
class CondDensityModel:
    """Nadaraya-Watson conditional density of the dose given covariates."""

    train_x: np.ndarray          # (T,)
    train_w: np.ndarray          # (T, d)
    bandwidth_x: float
    bandwidth_w: np.ndarray      # (d,)
    kernel: str = "gaussian"
    floor: float = 0.05

    def _w_weights(self, covariates: np.ndarray) -> np.ndarray:
        """(n, T) matrix of product-kernel weights in the covariates."""
        w = np.atleast_2d(np.asarray(covariates, dtype=float))
        if self.kernel == "gaussian":
            dist2 = np.zeros((w.shape[0], self.train_w.shape[0]))
            for s in range(w.shape[1]):
                u = (w[:, s, None] - self.train_w[None, :, s]) / self.bandwidth_w[s]
                dist2 += u * u
            norm = _SQRT_2PI ** w.shape[1] * float(np.prod(self.bandwidth_w))
            return np.exp(-0.5 * dist2) / norm
        out = np.ones((w.shape[0], self.train_w.shape[0]))
        for s in range(w.shape[1]):
            u = (w[:, s, None] - self.train_w[None, :, s]) / self.bandwidth_w[s]
            out *= _kernel_profile(u, self.kernel) / self.bandwidth_w[s]
        return out

    def density_pairs(self, doses: np.ndarray, covariates: np.ndarray) -> np.ndarray:
        """f(x_q | w_q) for paired query arrays, floored."""
        x = np.asarray(doses, dtype=float).ravel()
        kx = kernel_weight(x[:, None] - self.train_x[None, :], self.bandwidth_x, self.kernel)
        kw = self._w_weights(covariates)
        denom = kw.sum(axis=1)
        ok = denom > 0
        if not np.all(ok):
            warnings.warn("no kernel mass at some query points; returning the floor",
                          SparseRegionWarning, stacklevel=2)
        vals = np.full(x.shape, self.floor)
        vals[ok] = (kx[ok] * kw[ok]).sum(axis=1) / denom[ok]
        return np.maximum(vals, self.floor)

    def density_matrix(self, doses: np.ndarray, covariate_sample: np.ndarray) -> np.ndarray:
        """f(x_q | w_s) for every query dose and sample covariate, floored."""
        x = np.asarray(doses, dtype=float).ravel()
        kx = kernel_weight(x[:, None] - self.train_x[None, :], self.bandwidth_x, self.kernel)
        kw = self._w_weights(covariate_sample)
        denom = kw.sum(axis=1, keepdims=True)
        bad = denom[:, 0] <= 0
        if np.any(bad):
            warnings.warn("no kernel mass at some covariate points; returning the floor",
                          SparseRegionWarning, stacklevel=2)
            denom[bad, 0] = 1.0
            kw[bad] = 0.0
        vals = kx @ (kw / denom).T
        return np.maximum(vals, self.floor)

    def density(self, x: float, w: np.ndarray) -> float:
        return float(self.density_pairs(np.array([x]), np.atleast_2d(w))[0])


def fit_conditional_density(
    view: SubsampleView,
    bandwidth_rule: str = "silverman",
    floor: float = 0.05,
    kernel: str = "gaussian",
    bandwidth_x: float | None = None,
    bandwidth_w: float | None = None,
) -> CondDensityModel:
    """Nadaraya-Watson conditional density of the treatment given covariates."""
    if view.n_obs < 10:
        raise InsufficientData(f"conditional density needs >= 10 observations, got {view.n_obs}")
    x = view.treatments
    w = view.covariates
    if bandwidth_rule == "silverman":
        hx = silverman_bandwidth(x)
        hw = np.array([silverman_bandwidth(w[:, s]) for s in range(w.shape[1])])
    elif bandwidth_rule == "fixed":
        if bandwidth_x is None or bandwidth_w is None:
            raise ValueError("fixed bandwidth rule needs bandwidth_x and bandwidth_w")
        hx = float(bandwidth_x)
        hw = np.full(w.shape[1], float(bandwidth_w))
    else:
        raise ValueError(f"unknown bandwidth rule {bandwidth_rule!r}")
    return CondDensityModel(train_x=x.copy(), train_w=w.copy(), bandwidth_x=hx,
                            bandwidth_w=hw, kernel=kernel, floor=floor)


def marginal_density(model: CondDensityModel, covariate_sample: np.ndarray, x: float) -> float:
    """Marginal dose density: average of f(x | w) over the covariate sample."""
    sample = np.atleast_2d(np.asarray(covariate_sample, dtype=float))
    if sample.shape[0] == 0:
        raise InsufficientData("marginal density needs a non-empty covariate sample")
    return float(model.density_matrix(np.array([x]), sample).mean())


# --- fitted bundles --------------------------------------------------------


@dataclass(frozen=True)
class NuisanceFit:
    """Mode-dependent nuisance bundle trained on one subsample."""

    mode: Mode
    propensity: PropensityModel | None = None
    outcome0: OutcomeModel | None = None
    outcome1: OutcomeModel | None = None
    density: CondDensityModel | None = None
    outcome_c: OutcomeModel | None = None
    covariate_sample: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    # CATE interface
    def propensity_at(self, covariates: np.ndarray) -> np.ndarray:
        return self.propensity.predict(covariates)

    def outcome_at(self, arm: int, covariates: np.ndarray) -> np.ndarray:
        model = self.outcome1 if arm == 1 else self.outcome0
        return model.predict(covariates)

    # CTE interface
    def density_at(self, doses: np.ndarray, covariates: np.ndarray) -> np.ndarray:
        return self.density.density_pairs(doses, covariates)

    def outcome_xw_at(self, doses: np.ndarray, covariates: np.ndarray) -> np.ndarray:
        return self.outcome_c.predict_xw(doses, covariates)

    def omega_at(self, doses: np.ndarray, covariate_sample: np.ndarray) -> np.ndarray:
        return self.density.density_matrix(doses, covariate_sample).mean(axis=1)

    def plugin_at(self, doses: np.ndarray, covariate_sample: np.ndarray) -> np.ndarray:
        # The outcome surface is affine in w, so averaging predictions over the
        # sample equals predicting at the sample mean covariate.
        doses = np.asarray(doses, dtype=float).ravel()
        w_bar = np.asarray(covariate_sample, dtype=float).mean(axis=0)
        w_rep = np.broadcast_to(w_bar, (doses.size, w_bar.size))
        return self.outcome_c.predict_xw(doses, w_rep)


def fit_nuisances(view: SubsampleView, cfg: NuisanceConfig) -> NuisanceFit:
    """Train the full nuisance bundle for the view's mode."""
    diagnostics: dict = {}
    if view.mode == Mode.CATE:
        prop = fit_propensity(view, trim=cfg.trim, max_iter=cfg.max_iter, tol=cfg.tol)
        diagnostics["propensity_converged"] = prop.converged
        d = view.covariates.shape[1]
        counts = {arm: int((view.treatments == arm).sum()) for arm in (0, 1)}
        diagnostics["arm_counts"] = counts
        if cfg.small_arm_fallback and min(counts.values()) < d + 2:
            out0, out1 = _joint_outcome_models(view, cfg.ridge)
            diagnostics["outcome_fallback"] = "joint"
        else:
            out0 = fit_outcome_arm(view, 0, ridge=cfg.ridge)
            out1 = fit_outcome_arm(view, 1, ridge=cfg.ridge)
        return NuisanceFit(mode=view.mode, propensity=prop, outcome0=out0, outcome1=out1,
                           covariate_sample=view.covariates.copy(), diagnostics=diagnostics)
    density = fit_conditional_density(
        view,
        bandwidth_rule=cfg.bandwidth_rule,
        floor=cfg.density_floor,
        kernel=cfg.kernel,
        bandwidth_x=cfg.bandwidth_x,
        bandwidth_w=cfg.bandwidth_w,
    )
    outcome = fit_outcome_arm(view, "continuous", ridge=cfg.ridge, poly_order=cfg.cte_poly_order)
    return NuisanceFit(mode=view.mode, density=density, outcome_c=outcome,
                       covariate_sample=view.covariates.copy(), diagnostics=diagnostics)


# --- oracle bundles (known nuisance functions) ------------------------------


@dataclass(frozen=True)
class OracleCateNuisance:
    """CATE nuisances given as callables; used for injection and diagnostics."""

    pi_fn: object   # (n, d) -> (n,)
    mu1_fn: object
    mu0_fn: object
    trim: float = 0.0

    def propensity_at(self, covariates: np.ndarray) -> np.ndarray:
        lo = self.trim if self.trim > 0 else _PROB_CLIP
        return np.clip(self.pi_fn(np.atleast_2d(covariates)), lo, 1.0 - lo)

    def outcome_at(self, arm: int, covariates: np.ndarray) -> np.ndarray:
        fn = self.mu1_fn if arm == 1 else self.mu0_fn
        return np.asarray(fn(np.atleast_2d(covariates)), dtype=float)


@dataclass(frozen=True)
class OracleCteNuisance:
    """CTE nuisances given as callables."""

    density_fn: object   # (X, W) -> (n,)
    outcome_fn: object   # (X, W) -> (n,)
    omega_fn: object     # (X,) -> (n,)
    floor: float = 0.0

    def density_at(self, doses: np.ndarray, covariates: np.ndarray) -> np.ndarray:
        lo = self.floor if self.floor > 0 else 1e-300
        return np.maximum(self.density_fn(np.asarray(doses, dtype=float),
                                          np.atleast_2d(covariates)), lo)

    def outcome_xw_at(self, doses: np.ndarray, covariates: np.ndarray) -> np.ndarray:
        return np.asarray(self.outcome_fn(np.asarray(doses, dtype=float),
                                          np.atleast_2d(covariates)), dtype=float)

    def omega_at(self, doses: np.ndarray, covariate_sample: np.ndarray) -> np.ndarray:
        return np.asarray(self.omega_fn(np.asarray(doses, dtype=float)), dtype=float)

    def plugin_at(self, doses: np.ndarray, covariate_sample: np.ndarray) -> np.ndarray:
        doses = np.asarray(doses, dtype=float).ravel()
        sample = np.atleast_2d(np.asarray(covariate_sample, dtype=float))
        out = np.empty(doses.size)
        for q, x in enumerate(doses):
            out[q] = float(np.mean(self.outcome_fn(np.full(sample.shape[0], x), sample)))
        return out
