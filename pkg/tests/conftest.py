from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from causalbands.data import Mode, TwoWaySample
from causalbands.estimator import FULL_SAMPLE, SieveFit
from causalbands.sieve import BasisFamily, BasisSpec, GramMatrix
from causalbands.signals import SignalMatrix


def make_sample(n_rows=4, n_cols=5, d=2, mode=Mode.CATE, seed=0) -> TwoWaySample:
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((n_rows, n_cols, d))
    if mode == Mode.CATE:
        t = (rng.uniform(size=(n_rows, n_cols)) < 0.5).astype(float)
    else:
        t = rng.uniform(0.05, 0.95, size=(n_rows, n_cols))
    y = rng.standard_normal((n_rows, n_cols))
    return TwoWaySample(outcomes=y, treatments=t, covariates=w, mode=mode)


def make_synthetic_fit(cell_basis: np.ndarray, residuals: np.ndarray,
                       beta: np.ndarray | None = None,
                       gram: np.ndarray | None = None,
                       scale_n: int | None = None) -> SieveFit:
    """Assemble a SieveFit directly from arrays (no estimation involved)."""
    n_rows, n_cols, p = cell_basis.shape
    if gram is None:
        flat = cell_basis.reshape(-1, p)
        gram = flat.T @ flat / flat.shape[0]
    basis = BasisSpec(family=BasisFamily.POLYNOMIAL, dimension=p, domain=(-1.0, 1.0))
    signals = SignalMatrix(values=residuals.copy(), mode=Mode.CATE,
                           provenance=np.full((n_rows, n_cols), -1, dtype=np.int32))
    return SieveFit(
        beta=np.zeros(p) if beta is None else np.asarray(beta, dtype=float),
        gram=GramMatrix(matrix=np.asarray(gram, dtype=float), sample_size=n_rows * n_cols),
        basis=basis,
        residuals=np.asarray(residuals, dtype=float),
        cell_basis=np.asarray(cell_basis, dtype=float),
        signals=signals,
        scale_n=min(n_rows, n_cols) if scale_n is None else scale_n,
        flavor=FULL_SAMPLE,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
