"""Multiplier bootstrap calibration of uniform confidence bands.

The cluster-robust scheme perturbs row-level and column-level score
aggregates with independent standard normal multipliers; given the data, the
perturbed score is exactly zero-mean Gaussian with the estimated cluster
covariance, so the studentized process at any single point is standard
normal. Critical values are upper order statistics of the per-draw sup of the
absolute studentized process over the grid.

Draw b reads the Philox stream keyed (seed, b), so sup statistics do not
depend on chunking or worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import ceil

import numpy as np
from scipy.special import ndtri

from .data import GridSpec
from .errors import DegenerateVariance
from .estimator import ClusterCovariance, SieveFit, hajek_aggregates, sigma_tau_grid
from .rng import keyed_generator

MULTIWAY_BOOT = "multiway_boot"
IID_BOOT = "iid_boot"
POINTWISE_GAUSSIAN = "pointwise_gaussian"

_MIN_DRAWS = 100
_VAR_FLOOR = 1e-12


@dataclass(frozen=True)
class HajekScores:
    """Row-level and column-level score aggregates feeding the bootstrap."""

    row_scores: np.ndarray  # (N, p)
    col_scores: np.ndarray  # (M, p)


@dataclass(frozen=True)
class BandResult:
    """A confidence band over a grid: tau_hat +- cv * se pointwise."""

    grid: GridSpec
    tau_hat: np.ndarray
    se: np.ndarray
    critical_value: float
    lower: np.ndarray
    upper: np.ndarray
    alpha: float
    method: str
    draws: int
    seed: int
    scale_n: int
    metadata: dict = field(default_factory=dict)

    def covers(self, values: np.ndarray) -> bool:
        """True when the band contains ``values`` at every grid point."""
        v = np.asarray(values, dtype=float)
        return bool(np.all((self.lower <= v) & (v <= self.upper)))


def hajek_scores(fit: SieveFit) -> HajekScores:
    """Exact row/column averages of the weighted residual score."""
    g_row, g_col = hajek_aggregates(fit)
    return HajekScores(row_scores=g_row, col_scores=g_col)


def critical_value(sup_stats: np.ndarray, alpha: float) -> float:
    """The ceil((1 - alpha) * B)-th smallest sup statistic.

    The upper-order-statistic convention is conservative for finite B.
    """
    stats = np.sort(np.asarray(sup_stats, dtype=float).ravel())
    if stats.size == 0:
        raise ValueError("empty sup-statistic vector")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    k = ceil((1.0 - alpha) * stats.size)
    return float(stats[min(k, stats.size) - 1])


def _studentized_rows(fit: SieveFit, cov: ClusterCovariance, grid: GridSpec) -> tuple:
    """(L, p) matrix A with rows p(x_l)' Q^-1 / sigma_tau(x_l), and sigma."""
    sig = sigma_tau_grid(fit, cov, grid.points)
    bad = np.nonzero(sig <= _VAR_FLOOR)[0]
    if bad.size:
        raise DegenerateVariance(
            f"sigma_tau is numerically zero at grid point {bad[0]} (x={grid.points[bad[0]]!r})"
        )
    from .sieve import basis_matrix

    pts = basis_matrix(fit.basis, grid.points)
    a = fit.gram_solve(pts.T).T / sig[:, None]
    return a, sig


def _chunked_sup(chunk_fn, draws: int, workers: int) -> np.ndarray:
    out = np.empty(draws)
    chunk = max(64, ceil(draws / max(workers, 1)))
    ranges = [(lo, min(lo + chunk, draws)) for lo in range(0, draws, chunk)]
    if workers <= 1 or len(ranges) == 1:
        for lo, hi in ranges:
            out[lo:hi] = chunk_fn(lo, hi)
        return out
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {pool.submit(chunk_fn, lo, hi): (lo, hi) for lo, hi in ranges}
        for fut, (lo, hi) in futures.items():
            out[lo:hi] = fut.result()
    return out


def bootstrap_sup_stats(
    fit: SieveFit,
    scores: HajekScores,
    cov: ClusterCovariance,
    grid: GridSpec,
    draws: int,
    seed: int,
    workers: int = 1,
) -> np.ndarray:
    """Sup of |studentized multiplier process| over the grid, per draw.

    Draw b perturbs the row aggregates with fresh N(0, 1) multipliers and the
    column aggregates with independent ones, both from the stream keyed
    (seed, b).
    """
    if draws < _MIN_DRAWS:
        raise ValueError(f"need at least {_MIN_DRAWS} draws, got {draws}")
    a, _ = _studentized_rows(fit, cov, grid)
    g_row, g_col = scores.row_scores, scores.col_scores
    n_rows, n_cols = g_row.shape[0], g_col.shape[0]
    root_n = np.sqrt(min(n_rows, n_cols))

    def chunk_fn(lo: int, hi: int) -> np.ndarray:
        w1 = np.empty((hi - lo, n_rows))
        w2 = np.empty((hi - lo, n_cols))
        for b in range(lo, hi):
            gen = keyed_generator(seed, b)
            w1[b - lo] = gen.standard_normal(n_rows)
            w2[b - lo] = gen.standard_normal(n_cols)
        s = w1 @ g_row / n_rows + w2 @ g_col / n_cols
        t = root_n * (s @ a.T)
        return np.abs(t).max(axis=1)

    return _chunked_sup(chunk_fn, draws, workers)


def iid_sup_stats(
    fit: SieveFit,
    cov_iid: ClusterCovariance,
    grid: GridSpec,
    draws: int,
    seed: int,
    workers: int = 1,
) -> np.ndarray:
    """Sup stats for the cell-level multiplier scheme (independence-based)."""
    if draws < _MIN_DRAWS:
        raise ValueError(f"need at least {_MIN_DRAWS} draws, got {draws}")
    a, _ = _studentized_rows(fit, cov_iid, grid)
    p = fit.cell_basis.shape[2]
    design = fit.cell_basis.reshape(-1, p)
    score = design * fit.residuals.ravel()[:, None]  # (NM, p)
    n_cells = score.shape[0]
    root = np.sqrt(n_cells)

    def chunk_fn(lo: int, hi: int) -> np.ndarray:
        w = np.empty((hi - lo, n_cells))
        for b in range(lo, hi):
            w[b - lo] = keyed_generator(seed, b).standard_normal(n_cells)
        s = w @ score / root
        t = s @ a.T
        return np.abs(t).max(axis=1)

    return _chunked_sup(chunk_fn, draws, workers)


def _assemble(fit, cov, grid, alpha, cv, method, draws, seed, metadata) -> BandResult:
    from .sieve import basis_matrix

    sig = sigma_tau_grid(fit, cov, grid.points)
    tau = basis_matrix(fit.basis, grid.points) @ fit.beta
    se = sig / np.sqrt(cov.scale_n)
    radius = cv * se
    meta = {"variance_scale": cov.scale_n, "band_radius": "cv * sigma_tau(x) / sqrt(scale_n)"}
    meta.update(metadata)
    return BandResult(
        grid=grid,
        tau_hat=tau,
        se=se,
        critical_value=float(cv),
        lower=tau - radius,
        upper=tau + radius,
        alpha=alpha,
        method=method,
        draws=draws,
        seed=seed,
        scale_n=cov.scale_n,
        metadata=meta,
    )


def uniform_band(
    fit: SieveFit,
    cov: ClusterCovariance,
    grid: GridSpec,
    alpha: float,
    draws: int,
    seed: int,
    workers: int = 1,
) -> BandResult:
    """Cluster-robust multiplier-bootstrap uniform band."""
    scores = hajek_scores(fit)
    stats = bootstrap_sup_stats(fit, scores, cov, grid, draws, seed, workers=workers)
    cv = critical_value(stats, alpha)
    return _assemble(fit, cov, grid, alpha, cv, MULTIWAY_BOOT, draws, seed,
                     {"flavor": fit.flavor})


def pointwise_band(fit: SieveFit, cov: ClusterCovariance, grid: GridSpec, alpha: float) -> BandResult:
    """Pointwise Gaussian band (no multiplicity adjustment).

    A zero standard error collapses the band onto the point estimate.
    """
    z = float(ndtri(1.0 - alpha / 2.0))
    return _assemble(fit, cov, grid, alpha, z, POINTWISE_GAUSSIAN, 0, 0,
                     {"flavor": fit.flavor})


def iid_band(
    fit: SieveFit,
    cov_iid: ClusterCovariance,
    grid: GridSpec,
    alpha: float,
    draws: int,
    seed: int,
    workers: int = 1,
) -> BandResult:
    """Cell-level multiplier band: valid under independent cells only."""
    stats = iid_sup_stats(fit, cov_iid, grid, draws, seed, workers=workers)
    cv = critical_value(stats, alpha)
    return _assemble(fit, cov_iid, grid, alpha, cv, IID_BOOT, draws, seed,
                     {"flavor": fit.flavor})


def band_to_csv_rows(band: BandResult) -> list[list[str]]:
    """Rows for the documented CSV layout: x, tau_hat, se, lower, upper."""
    rows = [["x", "tau_hat", "se", "lower", "upper"]]
    for idx in range(band.grid.size):
        rows.append([
            repr(float(band.grid.points[idx])),
            repr(float(band.tau_hat[idx])),
            repr(float(band.se[idx])),
            repr(float(band.lower[idx])),
            repr(float(band.upper[idx])),
        ])
    return rows


def band_to_json_dict(band: BandResult) -> dict:
    """JSON document with method, alpha, draws, seed, cv, scaling metadata."""
    return {
        "method": band.method,
        "alpha": band.alpha,
        "draws": band.draws,
        "seed": band.seed,
        "critical_value": band.critical_value,
        "scale_n": band.scale_n,
        "metadata": band.metadata,
        "grid": [float(v) for v in band.grid.points],
        "tau_hat": [float(v) for v in band.tau_hat],
        "se": [float(v) for v in band.se],
        "lower": [float(v) for v in band.lower],
        "upper": [float(v) for v in band.upper],
    }


def band_from_json_dict(doc: dict) -> BandResult:
    """Inverse of :func:`band_to_json_dict` (exact float round-trip)."""
    return BandResult(
        grid=GridSpec(points=np.array(doc["grid"], dtype=float), origin="explicit"),
        tau_hat=np.array(doc["tau_hat"], dtype=float),
        se=np.array(doc["se"], dtype=float),
        critical_value=float(doc["critical_value"]),
        lower=np.array(doc["lower"], dtype=float),
        upper=np.array(doc["upper"], dtype=float),
        alpha=float(doc["alpha"]),
        method=doc["method"],
        draws=int(doc["draws"]),
        seed=int(doc["seed"]),
        scale_n=int(doc["scale_n"]),
        metadata=dict(doc["metadata"]),
    )
