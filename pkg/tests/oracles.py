"""Independent brute-force oracles.

Everything here is written against the definitions directly (explicit loops,
textbook elimination) and stays independent of the library's optimized paths,
so agreement is evidence rather than tautology.
"""

from __future__ import annotations

import numpy as np


def solve_by_elimination(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gaussian elimination with partial pivoting (no library solvers)."""
    a = np.array(a, dtype=float)
    b = np.array(b, dtype=float)
    n = a.shape[0]
    aug = np.hstack([a, b.reshape(n, -1)])
    for col in range(n):
        pivot = col + int(np.argmax(np.abs(aug[col:, col])))
        if abs(aug[pivot, col]) == 0.0:
            raise ZeroDivisionError("singular system")
        if pivot != col:
            aug[[col, pivot]] = aug[[pivot, col]]
        for row in range(col + 1, n):
            factor = aug[row, col] / aug[col, col]
            aug[row, col:] -= factor * aug[col, col:]
    x = np.zeros((n, aug.shape[1] - n))
    for row in range(n - 1, -1, -1):
        x[row] = (aug[row, n:] - a[row, row + 1:] @ x[row + 1:] if row + 1 < n else aug[row, n:])
        x[row] = (aug[row, n:] - aug[row, row + 1: n] @ x[row + 1:]) / aug[row, row]
    return x[:, 0] if b.ndim == 1 else x


def invert_by_elimination(a: np.ndarray) -> np.ndarray:
    return solve_by_elimination(a, np.eye(a.shape[0]))


def dot_by_loop(a, b) -> float:
    total = 0.0
    for x, y in zip(np.asarray(a, dtype=float).ravel(), np.asarray(b, dtype=float).ravel()):
        total += float(x) * float(y)
    return total


def gram_by_double_loop(basis_rows: np.ndarray) -> np.ndarray:
    """(1/n) sum of outer products, accumulated entry by entry."""
    rows = np.asarray(basis_rows, dtype=float)
    n, p = rows.shape
    q = np.zeros((p, p))
    for i in range(n):
        for s in range(p):
            for t in range(p):
                q[s, t] += rows[i, s] * rows[i, t]
    return q / n


def sigma_by_quadruple_loop(cell_basis: np.ndarray, residuals: np.ndarray) -> np.ndarray:
    """Literal row-pair and column-pair double sums of the score covariance."""
    n_rows, n_cols, p = cell_basis.shape
    n = min(n_rows, n_cols)
    sigma = np.zeros((p, p))
    for i in range(n_rows):
        for j in range(n_cols):
            for jp in range(n_cols):
                sigma += (
                    np.outer(cell_basis[i, j], cell_basis[i, jp])
                    * residuals[i, j] * residuals[i, jp]
                )
    for i in range(n_rows):
        for ip in range(n_rows):
            for j in range(n_cols):
                sigma += (
                    np.outer(cell_basis[i, j], cell_basis[ip, j])
                    * residuals[i, j] * residuals[ip, j]
                )
    return sigma * n / (n_rows**2 * n_cols**2)


def hajek_by_loops(cell_basis: np.ndarray, residuals: np.ndarray):
    """Row and column score averages accumulated with explicit loops."""
    n_rows, n_cols, p = cell_basis.shape
    g_row = np.zeros((n_rows, p))
    g_col = np.zeros((n_cols, p))
    for i in range(n_rows):
        for j in range(n_cols):
            g_row[i] += cell_basis[i, j] * residuals[i, j]
            g_col[j] += cell_basis[i, j] * residuals[i, j]
    return g_row / n_cols, g_col / n_rows


def ate_se_by_double_sums(values: np.ndarray) -> float:
    """Two-way cluster-robust SE of the grand mean, by literal double sums."""
    v = np.asarray(values, dtype=float)
    n_rows, n_cols = v.shape
    n = min(n_rows, n_cols)
    u = v - v.mean()
    total = 0.0
    for i in range(n_rows):
        for j in range(n_cols):
            for jp in range(n_cols):
                total += u[i, j] * u[i, jp]
    for i in range(n_rows):
        for ip in range(n_rows):
            for j in range(n_cols):
                total += u[i, j] * u[ip, j]
    sigma = total * n / (n_rows**2 * n_cols**2)
    return float(np.sqrt(sigma / n))


def sigma_tau_by_products(gram: np.ndarray, sigma: np.ndarray, px: np.ndarray) -> float:
    """sqrt(p' Q^-1 Sigma Q^-1 p) via elimination-based inversion."""
    qinv = invert_by_elimination(gram)
    vec = qinv @ px
    return float(np.sqrt(max(vec @ sigma @ vec, 0.0)))
