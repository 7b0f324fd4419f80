"""Two-way clustered samples: containers, CSV ingestion, folds, and grids.

A sample is a dense N x M grid of cells, one observation per cell. Cells that
share a row or a column index may be arbitrarily dependent; cells sharing
neither are treated as independent by every downstream procedure.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import (
    DuplicateCell,
    EmptyInput,
    IncompleteGrid,
    InvalidFoldCount,
    InvalidTreatment,
    SchemaError,
)
from .rng import keyed_generator

_FOLD_STREAM = 0x0F01D5

CSV_ROW = "row_id"
CSV_COL = "col_id"
CSV_OUTCOME = "y"
CSV_TREATMENT = "t"
CSV_COVARIATE_PREFIX = "w"


class Mode(str, Enum):
    """Estimand family: binary-treatment CATE or continuous-dose response."""

    CATE = "cate"
    CTE = "cte"


@dataclass(frozen=True)
class Observation:
    """One cell: outcome, treatment, covariate vector, conditioning value."""

    outcome: float
    treatment: float
    covariates: np.ndarray
    conditioning_value: float


@dataclass(frozen=True)
class TwoWaySample:
    """Dense N x M grid of observations.

    ``outcomes`` and ``treatments`` are (N, M); ``covariates`` is (N, M, d).
    In CATE mode the conditioning value is covariate coordinate ``x_coord``;
    in CTE mode it is the (continuous) treatment itself.
    """

    outcomes: np.ndarray
    treatments: np.ndarray
    covariates: np.ndarray
    mode: Mode
    x_coord: int = 0

    def __post_init__(self):
        y = np.asarray(self.outcomes, dtype=float)
        t = np.asarray(self.treatments, dtype=float)
        w = np.asarray(self.covariates, dtype=float)
        if y.ndim != 2 or t.shape != y.shape or w.shape[:2] != y.shape or w.ndim != 3:
            raise SchemaError("outcomes (N,M), treatments (N,M), covariates (N,M,d) required")
        if min(y.shape) < 2:
            raise SchemaError("effective size min(N, M) must be at least 2")
        if self.mode == Mode.CATE:
            if not np.all((t == 0.0) | (t == 1.0)):
                bad = t[(t != 0.0) & (t != 1.0)].flat[0]
                raise InvalidTreatment(f"treatment must be 0/1 in CATE mode, found {bad!r}")
            if not 0 <= self.x_coord < w.shape[2]:
                raise SchemaError(f"x_coord {self.x_coord} outside covariate range")
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "treatments", t)
        object.__setattr__(self, "covariates", w)

    @property
    def n_rows(self) -> int:
        return self.outcomes.shape[0]

    @property
    def n_cols(self) -> int:
        return self.outcomes.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[2]

    @property
    def effective_size(self) -> int:
        return min(self.n_rows, self.n_cols)

    @property
    def conditioning_values(self) -> np.ndarray:
        """(N, M) matrix of values the causal function is indexed by."""
        if self.mode == Mode.CATE:
            return self.covariates[:, :, self.x_coord]
        return self.treatments

    def cell(self, i: int, j: int) -> Observation:
        return Observation(
            outcome=float(self.outcomes[i, j]),
            treatment=float(self.treatments[i, j]),
            covariates=self.covariates[i, j].copy(),
            conditioning_value=float(self.conditioning_values[i, j]),
        )

    def view(self, rows: np.ndarray | None = None, cols: np.ndarray | None = None) -> SubsampleView:
        """Flattened view of the cells rows x cols (full sample by default)."""
        rows = np.arange(self.n_rows) if rows is None else np.asarray(rows, dtype=int)
        cols = np.arange(self.n_cols) if cols is None else np.asarray(cols, dtype=int)
        ix = np.ix_(rows, cols)
        return SubsampleView(
            outcomes=self.outcomes[ix].ravel(),
            treatments=self.treatments[ix].ravel(),
            covariates=self.covariates[ix].reshape(-1, self.n_covariates),
            conditioning=self.conditioning_values[ix].ravel(),
            rows=rows,
            cols=cols,
            mode=self.mode,
        )


@dataclass(frozen=True)
class SubsampleView:
    """Materialized flat arrays over a rows x cols sub-grid.

    The view copies exactly the selected cells, so code holding a view cannot
    read cells outside it.
    """

    outcomes: np.ndarray
    treatments: np.ndarray
    covariates: np.ndarray
    conditioning: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    mode: Mode

    @property
    def n_obs(self) -> int:
        return self.outcomes.shape[0]


@dataclass(frozen=True)
class FoldPartition:
    """Balanced random partitions of [N] and [M] into K folds each."""

    k_folds: int
    row_folds: tuple[np.ndarray, ...]
    col_folds: tuple[np.ndarray, ...]
    seed: int

    def complement(self, k: int, ell: int) -> tuple[np.ndarray, np.ndarray]:
        """Rows outside fold k and columns outside fold ell."""
        rows = np.concatenate([f for i, f in enumerate(self.row_folds) if i != k])
        cols = np.concatenate([f for j, f in enumerate(self.col_folds) if j != ell])
        return np.sort(rows), np.sort(cols)


@dataclass(frozen=True)
class GridSpec:
    """Sorted evaluation grid for the causal function."""

    points: np.ndarray
    origin: str = "explicit"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 1:
            raise EmptyInput("grid needs at least one point")
        if pts.size > 1 and not np.all(np.diff(pts) > 0):
            raise SchemaError("grid points must be strictly increasing")
        object.__setattr__(self, "points", pts)

    @property
    def size(self) -> int:
        return self.points.size


def partition_folds(sample: TwoWaySample, k: int, seed: int) -> FoldPartition:
    """Random balanced K-fold partitions of rows and of columns.

    Deterministic given ``seed``; after shuffling, remainder indices go one
    per fold in fold order (fold sizes differ by at most one).
    """
    n, m = sample.n_rows, sample.n_cols
    if k < 2 or k > min(n, m):
        raise InvalidFoldCount(f"K={k} outside [2, {min(n, m)}]")
    rng = keyed_generator(seed, _FOLD_STREAM)
    row_folds = tuple(np.sort(f) for f in np.array_split(rng.permutation(n), k))
    col_folds = tuple(np.sort(f) for f in np.array_split(rng.permutation(m), k))
    return FoldPartition(k_folds=k, row_folds=row_folds, col_folds=col_folds, seed=seed)


def quantile_grid(values: np.ndarray, lo: float, hi: float, count: int) -> GridSpec:
    """``count`` equally spaced points between empirical lo/hi quantiles.

    Quantiles use the linear-interpolation convention. A degenerate quantile
    range collapses to a single point.
    """
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise EmptyInput("quantile_grid needs a non-empty value vector")
    if not (0.0 <= lo < hi <= 1.0):
        raise ValueError(f"need 0 <= lo < hi <= 1, got lo={lo}, hi={hi}")
    if count < 1:
        raise ValueError("count must be at least 1")
    qlo, qhi = np.quantile(values, [lo, hi])
    if qlo == qhi:
        return GridSpec(points=np.array([qlo]), origin="quantile-range")
    return GridSpec(points=np.linspace(qlo, qhi, count), origin="quantile-range")


def _resolve_schema(header: list[str], schema: dict | None) -> tuple[str, str, str, str, list[str]]:
    schema = dict(schema or {})
    row = schema.get("row", CSV_ROW)
    col = schema.get("col", CSV_COL)
    outcome = schema.get("outcome", CSV_OUTCOME)
    treatment = schema.get("treatment", CSV_TREATMENT)
    for name, role in ((row, "row"), (col, "col"), (outcome, "outcome"), (treatment, "treatment")):
        if name not in header:
            raise SchemaError(f"column {name!r} for role {role!r} not in header {header}")
    covariates = schema.get("covariates")
    if covariates is None:
        reserved = {row, col, outcome, treatment}
        covariates = [c for c in header if c not in reserved]
    else:
        covariates = list(covariates)
        missing = [c for c in covariates if c not in header]
        if missing:
            raise SchemaError(f"covariate columns {missing} not in header")
    if not covariates:
        raise SchemaError("no covariate columns found")
    return row, col, outcome, treatment, covariates


def load_csv(path, mode: Mode, schema: dict | None = None, x_coord: int = 0) -> TwoWaySample:
    """Read a dense two-way sample from CSV.

    Expected header: ``row_id, col_id, y, t, w1, ..., wd`` (names remappable
    through ``schema``). Row and column ids may be arbitrary strings; they are
    interned to contiguous indices in first-appearance order.
    """
    mode = Mode(mode)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        row_c, col_c, y_c, t_c, w_cs = _resolve_schema(header, schema)
        idx = {name: k for k, name in enumerate(header)}
        w_idx = [idx[c] for c in w_cs]

        row_ids: dict[str, int] = {}
        col_ids: dict[str, int] = {}
        cells: dict[tuple[int, int], tuple[float, float, list[float]]] = {}
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise SchemaError(f"{path}:{lineno}: expected {len(header)} fields, found {len(rec)}")
            try:
                y = float(rec[idx[y_c]])
                t = float(rec[idx[t_c]])
                w = [float(rec[k]) for k in w_idx]
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
            ri = row_ids.setdefault(rec[idx[row_c]], len(row_ids))
            ci = col_ids.setdefault(rec[idx[col_c]], len(col_ids))
            if (ri, ci) in cells:
                raise DuplicateCell(f"{path}:{lineno}: duplicate cell ({rec[idx[row_c]]!r}, {rec[idx[col_c]]!r})")
            cells[(ri, ci)] = (y, t, w)

    n, m = len(row_ids), len(col_ids)
    if n == 0 or m == 0:
        raise SchemaError(f"{path}: no data rows")
    if len(cells) != n * m:
        rev_r = {v: k for k, v in row_ids.items()}
        rev_c = {v: k for k, v in col_ids.items()}
        for i in range(n):
            for j in range(m):
                if (i, j) not in cells:
                    raise IncompleteGrid(
                        f"{path}: missing cell ({rev_r[i]!r}, {rev_c[j]!r}) of the {n}x{m} grid"
                    )
    d = len(next(iter(cells.values()))[2])
    outcomes = np.empty((n, m))
    treatments = np.empty((n, m))
    covariates = np.empty((n, m, d))
    for (i, j), (y, t, w) in cells.items():
        outcomes[i, j] = y
        treatments[i, j] = t
        covariates[i, j] = w
    return TwoWaySample(outcomes, treatments, covariates, mode=mode, x_coord=x_coord)


def write_csv(sample: TwoWaySample, path) -> None:
    """Write a sample in the schema read by :func:`load_csv` (repr floats)."""
    d = sample.n_covariates
    header = [CSV_ROW, CSV_COL, CSV_OUTCOME, CSV_TREATMENT] + [f"w{s + 1}" for s in range(d)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(sample.n_rows):
            for j in range(sample.n_cols):
                rec = [str(i + 1), str(j + 1), repr(float(sample.outcomes[i, j])),
                       repr(float(sample.treatments[i, j]))]
                rec += [repr(float(v)) for v in sample.covariates[i, j]]
                writer.writerow(rec)
