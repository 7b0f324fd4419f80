"""Sieve bases, Gram matrices, and the regularized second-step solver."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.linalg
from scipy.interpolate import BSpline

from .errors import RankDeficiencyRisk, SingularGram

MAX_POLY_DIMENSION = 16


class BasisFamily(str, Enum):
    POLYNOMIAL = "polynomial"
    BSPLINE = "b-spline"


@dataclass(frozen=True)
class BasisSpec:
    """A fixed dictionary of basis functions on a closed interval.

    Polynomial: powers (1, t, ..., t^(p-1)) of the affine map of [a, b] onto
    [-1, 1] (raw powers on wide domains wreck Gram conditioning, and the
    fitted function is invariant to the reparameterization).
    B-spline: clamped splines of the given degree with strictly increasing
    interior knots, so dimension p = #knots + degree + 1.

    Evaluation clamps x to [a, b]; no extrapolation.
    """

    family: BasisFamily
    dimension: int
    domain: tuple[float, float]
    degree: int | None = None
    knots: np.ndarray | None = None

    def __post_init__(self):
        a, b = self.domain
        if not (np.isfinite(a) and np.isfinite(b) and a < b):
            raise ValueError(f"domain must be a finite interval, got {self.domain}")
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if self.family == BasisFamily.POLYNOMIAL:
            if self.dimension > MAX_POLY_DIMENSION:
                raise ValueError(f"polynomial dimension capped at {MAX_POLY_DIMENSION}")
        else:
            if self.degree is None or self.degree < 1:
                raise ValueError("b-spline basis needs a degree >= 1")
            knots = np.asarray(self.knots if self.knots is not None else [], dtype=float)
            if knots.size and (np.any(np.diff(knots) <= 0) or knots[0] <= a or knots[-1] >= b):
                raise ValueError("interior knots must be strictly increasing inside (a, b)")
            if self.dimension != knots.size + self.degree + 1:
                raise ValueError(
                    f"dimension {self.dimension} != #knots {knots.size} + degree {self.degree} + 1"
                )
            object.__setattr__(self, "knots", knots)


@dataclass(frozen=True)
class GramMatrix:
    """Empirical second-moment matrix of the basis, Q = avg p(x) p(x)'."""

    matrix: np.ndarray
    sample_size: int

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]


def basis_for_values(
    family: BasisFamily | str,
    dimension: int,
    values: np.ndarray,
    degree: int = 3,
) -> BasisSpec:
    """Build a basis whose domain covers ``values`` (knots at quantiles)."""
    family = BasisFamily(family)
    values = np.asarray(values, dtype=float).ravel()
    a, b = float(values.min()), float(values.max())
    if a == b:
        a, b = a - 0.5, b + 0.5
    if family == BasisFamily.POLYNOMIAL:
        return BasisSpec(family=family, dimension=dimension, domain=(a, b))
    n_interior = dimension - degree - 1
    if n_interior < 0:
        raise ValueError(f"b-spline dimension must be >= degree + 1 = {degree + 1}")
    if n_interior == 0:
        knots = np.empty(0)
    else:
        probs = np.linspace(0.0, 1.0, n_interior + 2)[1:-1]
        knots = np.unique(np.quantile(values, probs))
        knots = knots[(knots > a) & (knots < b)]
        if knots.size != n_interior:
            # Ties in the data collapsed some knots; fall back to a uniform rule.
            knots = np.linspace(a, b, n_interior + 2)[1:-1]
    return BasisSpec(family=family, dimension=degree + 1 + knots.size, domain=(a, b),
                     degree=degree, knots=knots)


def _full_knots(spec: BasisSpec) -> np.ndarray:
    a, b = spec.domain
    k = spec.degree
    return np.concatenate([np.full(k + 1, a), spec.knots, np.full(k + 1, b)])


def basis_matrix(spec: BasisSpec, xs: np.ndarray) -> np.ndarray:
    """Evaluate all basis functions at each point: (n, p) design matrix."""
    xs = np.asarray(xs, dtype=float).ravel()
    a, b = spec.domain
    t = np.clip(xs, a, b)
    if spec.family == BasisFamily.POLYNOMIAL:
        u = (2.0 * t - a - b) / (b - a)
        return np.vander(u, spec.dimension, increasing=True)
    return BSpline.design_matrix(t, _full_knots(spec), spec.degree).toarray()


def evaluate_basis(spec: BasisSpec, x: float) -> np.ndarray:
    """Basis vector p(x) of length p (x clamped to the domain)."""
    return basis_matrix(spec, np.array([x]))[0]


def basis_sup_norm(spec: BasisSpec, probe_points: int = 1000) -> float:
    """sup_x ||p(x)|| approximated on a dense probe grid."""
    a, b = spec.domain
    grid = np.linspace(a, b, probe_points)
    return float(np.linalg.norm(basis_matrix(spec, grid), axis=1).max())


def gram_matrix(spec: BasisSpec, conditioning_values: np.ndarray) -> GramMatrix:
    """Q = (1/n) sum p(x_i) p(x_i)' over the given conditioning values."""
    values = np.asarray(conditioning_values, dtype=float).ravel()
    if values.size < spec.dimension:
        warnings.warn(
            f"only {values.size} values for a {spec.dimension}-dimensional basis",
            RankDeficiencyRisk,
            stacklevel=2,
        )
    b = basis_matrix(spec, values)
    q = b.T @ b / values.size
    return GramMatrix(matrix=0.5 * (q + q.T), sample_size=values.size)


def gram_from_design(design: np.ndarray) -> GramMatrix:
    """Gram matrix from a precomputed (n, p) design matrix."""
    n = design.shape[0]
    q = design.T @ design / n
    return GramMatrix(matrix=0.5 * (q + q.T), sample_size=n)


@dataclass(frozen=True)
class SymmetricSolve:
    """Cholesky factorization of Q + ridge*I, reusable for solves."""

    factor: tuple
    ridge: float

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve(self.factor, rhs)


def factorize(gram: GramMatrix, ridge: float = 0.0) -> SymmetricSolve:
    """Factorize Q + ridge*I; raises SingularGram when not positive definite."""
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    p = gram.dimension
    a = gram.matrix + ridge * np.eye(p) if ridge > 0 else gram.matrix
    try:
        factor = scipy.linalg.cho_factor(a, lower=True)
    except (scipy.linalg.LinAlgError, np.linalg.LinAlgError) as exc:
        raise SingularGram(f"Gram factorization failed (ridge={ridge}): {exc}") from None
    return SymmetricSolve(factor=factor, ridge=ridge)


def solve_least_squares(gram: GramMatrix, moment: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """Solve (Q + ridge*I) beta = moment by a symmetric PD factorization."""
    moment = np.asarray(moment, dtype=float).ravel()
    if moment.size != gram.dimension:
        raise ValueError(f"moment length {moment.size} != basis dimension {gram.dimension}")
    return factorize(gram, ridge).solve(moment)


def fallback_ridge(gram: GramMatrix) -> float:
    """Automatic ridge used when the unregularized solve fails."""
    return 1e-8 * float(np.trace(gram.matrix)) / gram.dimension
