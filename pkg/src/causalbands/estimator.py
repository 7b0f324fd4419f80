"""Second-step sieve regression and cluster-robust variance estimation.

The causal function is the projection of the generated outcome onto a basis
of the conditioning value. Full-sample fits train nuisances once; cross-fits
partition rows and columns into K folds each and, for block (k, l), train
nuisances on the complement rows x complement columns, which share no index
with the block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import FoldPartition, GridSpec, Mode, TwoWaySample, partition_folds
from .errors import DegenerateTreatment, NumericalInstability, SingularGram
from .nuisance import NuisanceConfig, fit_nuisances
from .sieve import (
    BasisSpec,
    GramMatrix,
    SymmetricSolve,
    basis_matrix,
    factorize,
    fallback_ridge,
    gram_from_design,
    solve_least_squares,
)
from .signals import SignalMatrix, cate_signal_values, cte_signal_values, signal_matrix_full

FULL_SAMPLE = "full_sample"
PER_BLOCK = "per_block"
AVERAGED_CROSS_FIT = "averaged_cross_fit"


@dataclass
class SieveFit:
    """A solved second-step regression with everything the bands need."""

    beta: np.ndarray             # (p,)
    gram: GramMatrix
    basis: BasisSpec
    residuals: np.ndarray        # (N, M) on the cells this fit covers
    cell_basis: np.ndarray       # (N, M, p)
    signals: SignalMatrix
    scale_n: int                 # effective cluster count for the rate
    flavor: str
    block: tuple[int, int] | None = None
    ridge_used: float = 0.0
    ridge_fallback: bool = False
    diagnostics: dict = field(default_factory=dict)
    _solver: SymmetricSolve | None = None

    def gram_solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve Q v = rhs with the same factorization used for the fit."""
        if self._solver is None:
            self._solver = factorize(self.gram, self.ridge_used)
        return self._solver.solve(rhs)


@dataclass(frozen=True)
class ClusterCovariance:
    """Score covariance with the scale its rate refers to.

    ``scale_n`` is min(N, M) for the two-way cluster-robust covariance and
    N * M for the independence-based one, so a band radius is always
    cv * sigma_tau(x) / sqrt(scale_n).
    """

    sigma: np.ndarray
    scale_n: int


@dataclass(frozen=True)
class CrossFitResult:
    """Averaged cross-fit estimate plus the per-block fits that built it."""

    averaged: SieveFit
    blocks: list[SieveFit]
    folds: FoldPartition


def _solve_with_fallback(gram: GramMatrix, moment: np.ndarray, ridge: float):
    """Solve the normal equations, retrying once with an automatic ridge."""
    try:
        return solve_least_squares(gram, moment, ridge), ridge, False
    except SingularGram:
        retry = max(ridge, fallback_ridge(gram))
        return solve_least_squares(gram, moment, retry), retry, True


def _signals_for_view(view, fit, mode: Mode) -> np.ndarray:
    if mode == Mode.CATE:
        return cate_signal_values(view.outcomes, view.treatments, view.covariates, fit)
    return cte_signal_values(view.outcomes, view.treatments, view.covariates,
                             fit, fit.covariate_sample)


def fit_full_sample(
    sample: TwoWaySample,
    basis: BasisSpec,
    nuisance_cfg: NuisanceConfig | None = None,
    *,
    signals: np.ndarray | None = None,
) -> SieveFit:
    """Nuisances on the full sample, then one sieve regression on all cells.

    ``signals`` injects a precomputed generated-outcome matrix and skips the
    nuisance step entirely (used for diagnostics and oracle studies).
    """
    cfg = nuisance_cfg or NuisanceConfig()
    n_rows, n_cols = sample.n_rows, sample.n_cols
    diagnostics: dict = {}
    if signals is None:
        nuis = fit_nuisances(sample.view(), cfg)
        sig = signal_matrix_full(sample, nuis)
        diagnostics["nuisance"] = nuis.diagnostics
    else:
        values = np.asarray(signals, dtype=float)
        if values.shape != (n_rows, n_cols):
            raise ValueError(f"injected signals must have shape {(n_rows, n_cols)}")
        sig = SignalMatrix(values=values, mode=sample.mode,
                           provenance=np.full((n_rows, n_cols), -1, dtype=np.int32))
        diagnostics["nuisance"] = "injected"

    design = basis_matrix(basis, sample.conditioning_values.ravel())
    gram = gram_from_design(design)
    moment = design.T @ sig.values.ravel() / design.shape[0]
    beta, ridge_used, fell_back = _solve_with_fallback(gram, moment, cfg.ridge)
    fitted = (design @ beta).reshape(n_rows, n_cols)
    return SieveFit(
        beta=beta,
        gram=gram,
        basis=basis,
        residuals=sig.values - fitted,
        cell_basis=design.reshape(n_rows, n_cols, basis.dimension),
        signals=sig,
        scale_n=sample.effective_size,
        flavor=FULL_SAMPLE,
        ridge_used=ridge_used,
        ridge_fallback=fell_back,
        diagnostics=diagnostics,
    )


PER_BLOCK_GRAM = "per_block"
POOLED_GRAM = "pooled"


def fit_cross_fitted(
    sample: TwoWaySample,
    basis: BasisSpec,
    nuisance_cfg: NuisanceConfig | None = None,
    k_folds: int = 2,
    seed: int = 0,
    *,
    signals: np.ndarray | None = None,
    gram_mode: str = PER_BLOCK_GRAM,
) -> CrossFitResult:
    """K x K multiway cross-fitting.

    For each block (k, l), nuisances are trained on complement rows x
    complement columns, signals and the block regression are computed on the
    block, and the averaged estimate is the mean of the K^2 coefficient
    vectors (all blocks share one basis, so averaging coefficients averages
    the fitted functions pointwise). Residuals pool each block's own
    coefficients.

    ``gram_mode`` picks the matrix inverted in the block solves. "per_block"
    uses each block's own Gram matrix; "pooled" uses the average of the block
    Grams for every solve, which leaves the averaged coefficients equal to a
    single solve against the averaged moment. At small cluster counts the
    per-block Grams are noisy and their inversion inflates the averaged
    estimator's tail variance beyond what the pooled covariance tracks, so
    the band pipelines default to "pooled".
    """
    if gram_mode not in (PER_BLOCK_GRAM, POOLED_GRAM):
        raise ValueError(f"gram_mode must be '{PER_BLOCK_GRAM}' or '{POOLED_GRAM}'")
    cfg = nuisance_cfg or NuisanceConfig()
    folds = partition_folds(sample, k_folds, seed)
    n_rows, n_cols, p = sample.n_rows, sample.n_cols, basis.dimension

    design_full = basis_matrix(basis, sample.conditioning_values.ravel())
    cell_basis = design_full.reshape(n_rows, n_cols, p)

    injected = None
    if signals is not None:
        injected = np.asarray(signals, dtype=float)
        if injected.shape != (n_rows, n_cols):
            raise ValueError(f"injected signals must have shape {(n_rows, n_cols)}")

    # First pass: per-block signals, Grams, and moments.
    block_data = []
    for k in range(k_folds):
        for ell in range(k_folds):
            rows, cols = folds.row_folds[k], folds.col_folds[ell]
            ix = np.ix_(rows, cols)
            if injected is None:
                comp_rows, comp_cols = folds.complement(k, ell)
                try:
                    nuis = fit_nuisances(sample.view(comp_rows, comp_cols), cfg)
                except DegenerateTreatment as exc:
                    raise DegenerateTreatment(
                        f"block ({k}, {ell}): {exc}", block=(k, ell)
                    ) from None
                block_view = sample.view(rows, cols)
                vals = _signals_for_view(block_view, nuis, sample.mode)
                block_diag = nuis.diagnostics
            else:
                vals = injected[ix].ravel()
                block_diag = "injected"
            b_design = cell_basis[ix].reshape(-1, p)
            b_gram = gram_from_design(b_design)
            b_moment = b_design.T @ vals / b_design.shape[0]
            block_data.append((k, ell, rows, cols, vals, b_gram, b_moment, block_diag))

    pooled_gram = GramMatrix(
        matrix=np.mean(np.stack([bd[5].matrix for bd in block_data]), axis=0),
        sample_size=n_rows * n_cols,
    )

    pooled_values = np.empty((n_rows, n_cols))
    pooled_resid = np.empty((n_rows, n_cols))
    provenance = np.empty((n_rows, n_cols), dtype=np.int32)
    blocks: list[SieveFit] = []
    betas = []
    pooled_solver = None
    pooled_ridge, pooled_fell = cfg.ridge, False
    if gram_mode == POOLED_GRAM:
        try:
            pooled_solver = factorize(pooled_gram, cfg.ridge)
            pooled_ridge = cfg.ridge
        except SingularGram:
            pooled_ridge = max(cfg.ridge, fallback_ridge(pooled_gram))
            pooled_solver = factorize(pooled_gram, pooled_ridge)
            pooled_fell = True

    for k, ell, rows, cols, vals, b_gram, b_moment, block_diag in block_data:
        ix = np.ix_(rows, cols)
        if gram_mode == POOLED_GRAM:
            b_beta = pooled_solver.solve(b_moment)
            b_ridge, b_fell = pooled_ridge, pooled_fell
            solve_gram = pooled_gram
        else:
            b_beta, b_ridge, b_fell = _solve_with_fallback(b_gram, b_moment, cfg.ridge)
            solve_gram = b_gram
        resid = vals - cell_basis[ix].reshape(-1, p) @ b_beta

        vmat = vals.reshape(rows.size, cols.size)
        rmat = resid.reshape(rows.size, cols.size)
        pooled_values[ix] = vmat
        pooled_resid[ix] = rmat
        provenance[ix] = k * k_folds + ell
        betas.append(b_beta)
        blocks.append(SieveFit(
            beta=b_beta,
            gram=solve_gram,
            basis=basis,
            residuals=rmat,
            cell_basis=cell_basis[ix],
            signals=SignalMatrix(values=vmat, mode=sample.mode,
                                 provenance=np.full(vmat.shape, k * k_folds + ell,
                                                    dtype=np.int32)),
            scale_n=min(rows.size, cols.size),
            flavor=PER_BLOCK,
            block=(k, ell),
            ridge_used=b_ridge,
            ridge_fallback=b_fell,
            diagnostics={"nuisance": block_diag},
        ))

    beta_avg = np.mean(np.stack(betas, axis=0), axis=0)
    avg_gram = pooled_gram if gram_mode == POOLED_GRAM else gram_from_design(design_full)
    pooled_signals = SignalMatrix(values=pooled_values, mode=sample.mode, provenance=provenance)
    averaged = SieveFit(
        beta=beta_avg,
        gram=avg_gram,
        basis=basis,
        residuals=pooled_resid,
        cell_basis=cell_basis,
        signals=pooled_signals,
        scale_n=sample.effective_size,
        flavor=AVERAGED_CROSS_FIT,
        ridge_used=max(b.ridge_used for b in blocks),
        ridge_fallback=any(b.ridge_fallback for b in blocks),
        diagnostics={"gram_mode": gram_mode,
                     "blocks": [b.diagnostics for b in blocks]},
    )
    return CrossFitResult(averaged=averaged, blocks=blocks, folds=folds)


def hajek_aggregates(fit: SieveFit) -> tuple[np.ndarray, np.ndarray]:
    """Row and column averages of the weighted residual score.

    g_row[i] = (1/M) sum_j p_ij u_ij, g_col[j] = (1/N) sum_i p_ij u_ij.
    """
    n_rows, n_cols = fit.residuals.shape
    g_row = np.einsum("ijp,ij->ip", fit.cell_basis, fit.residuals) / n_cols
    g_col = np.einsum("ijp,ij->jp", fit.cell_basis, fit.residuals) / n_rows
    return g_row, g_col


def cluster_covariance(fit: SieveFit) -> ClusterCovariance:
    """Two-way cluster-robust score covariance.

    Computed through the row/column aggregates, which is algebraically
    identical to the double sums over cell pairs sharing a row or a column
    but costs O(NMp) instead of O(N M^2 p^2). The result is a sum of two
    nonnegative-weighted outer-product sums, hence PSD by construction.
    """
    n_rows, n_cols = fit.residuals.shape
    n = min(n_rows, n_cols)
    g_row, g_col = hajek_aggregates(fit)
    sigma = (n / n_rows**2) * (g_row.T @ g_row) + (n / n_cols**2) * (g_col.T @ g_col)
    return ClusterCovariance(sigma=0.5 * (sigma + sigma.T), scale_n=n)


def blockwise_covariance(blocks: list[SieveFit]) -> tuple[GramMatrix, ClusterCovariance]:
    """Average of per-block covariances and Gram matrices.

    Alternative to the pooled covariance for cross-fit bands; the rate scale
    is the smallest block dimension.
    """
    sigmas = []
    grams = []
    scale = None
    for b in blocks:
        cov = cluster_covariance(b)
        sigmas.append(cov.sigma)
        grams.append(b.gram.matrix)
        scale = cov.scale_n if scale is None else min(scale, cov.scale_n)
    gram = GramMatrix(matrix=np.mean(np.stack(grams), axis=0),
                      sample_size=sum(b.gram.sample_size for b in blocks))
    return gram, ClusterCovariance(sigma=np.mean(np.stack(sigmas), axis=0), scale_n=scale)


def blockwise_variant(result: CrossFitResult) -> tuple[SieveFit, ClusterCovariance]:
    """Averaged fit re-equipped with block-averaged Gram and covariance.

    Flagged alternative to the pooled default for cross-fit bands; the band
    rate becomes the smallest block dimension.
    """
    gram, cov = blockwise_covariance(result.blocks)
    avg = result.averaged
    fit = SieveFit(
        beta=avg.beta,
        gram=gram,
        basis=avg.basis,
        residuals=avg.residuals,
        cell_basis=avg.cell_basis,
        signals=avg.signals,
        scale_n=cov.scale_n,
        flavor=avg.flavor,
        ridge_used=avg.ridge_used,
        ridge_fallback=avg.ridge_fallback,
        diagnostics={**avg.diagnostics, "variance_mode": "blockwise"},
    )
    return fit, cov


def iid_covariance(fit: SieveFit) -> ClusterCovariance:
    """Independence-based (heteroskedasticity-only) score covariance.

    avg over cells of p p' u^2, paired with the sqrt(N*M) rate; the
    comparator for the cell-level multiplier bootstrap.
    """
    n_rows, n_cols = fit.residuals.shape
    p = fit.cell_basis.shape[2]
    design = fit.cell_basis.reshape(-1, p)
    u = fit.residuals.ravel()
    sigma = (design * (u * u)[:, None]).T @ design / design.shape[0]
    return ClusterCovariance(sigma=0.5 * (sigma + sigma.T), scale_n=n_rows * n_cols)


def sigma_tau_grid(fit: SieveFit, cov: ClusterCovariance, xs: np.ndarray) -> np.ndarray:
    """sigma_tau(x) = sqrt(p(x)' Q^-1 Sigma Q^-1 p(x)) on a vector of points.

    Uses the fit's own Gram factorization so the variance and the point
    estimate always share one regularization. Values below the negative
    numerical tolerance raise; small negatives are clipped to zero.
    """
    pts = basis_matrix(fit.basis, np.asarray(xs, dtype=float).ravel())
    v = fit.gram_solve(pts.T)  # (p, L) = Q^-1 p(x_l)
    quad = np.einsum("pl,pq,ql->l", v, cov.sigma, v)
    tol = -1e-10 * max(float(np.linalg.norm(cov.sigma)), 1.0)
    if np.any(quad < tol):
        raise NumericalInstability(f"variance form {quad.min():.3e} below tolerance {tol:.3e}")
    return np.sqrt(np.clip(quad, 0.0, None))


def sigma_tau(fit: SieveFit, cov: ClusterCovariance, x: float) -> float:
    """Variance function at a single point."""
    return float(sigma_tau_grid(fit, cov, np.array([x]))[0])


def evaluate_tau(fit: SieveFit, x) -> np.ndarray | float:
    """Fitted causal function p(x)' beta, scalar in scalar out."""
    xs = np.asarray(x, dtype=float)
    vals = basis_matrix(fit.basis, xs.ravel()) @ fit.beta
    if xs.ndim == 0:
        return float(vals[0])
    return vals.reshape(xs.shape)


def summary_lines(fit: SieveFit) -> list[str]:
    """Line-oriented text summary: coefficients, Gram trace, ridge, blocks."""
    lines = [
        "flavor " + fit.flavor + ("" if fit.block is None else f" {fit.block[0]} {fit.block[1]}"),
        "beta " + " ".join(repr(float(b)) for b in fit.beta),
        f"gram_trace {np.trace(fit.gram.matrix)!r}",
        f"ridge {fit.ridge_used!r} fallback {int(fit.ridge_fallback)}",
        f"scale_n {fit.scale_n}",
    ]
    blocks = fit.diagnostics.get("blocks")
    if blocks is not None:
        for idx, diag in enumerate(blocks):
            lines.append(f"block {idx} diagnostics {diag}")
    return lines
