from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causalbands.data import (
    Mode,
    TwoWaySample,
    load_csv,
    partition_folds,
    quantile_grid,
    write_csv,
)
from causalbands.errors import (
    DuplicateCell,
    EmptyInput,
    IncompleteGrid,
    InvalidFoldCount,
    InvalidTreatment,
    SchemaError,
)
from causalbands.simulation import DgpConfigCATE, simulate_cate

from conftest import make_sample


def _write(tmp_path, text):
    path = tmp_path / "data.csv"
    path.write_text(text, encoding="utf-8")
    return path


def test_load_csv_smallest_grid(tmp_path):
    path = _write(tmp_path, "row_id,col_id,y,t,w1\n" "a,u,1.0,1,0.1\n" "a,v,2.0,0,0.2\n"
                  "b,u,3.0,1,0.3\n" "b,v,4.0,0,0.4\n")
    sample = load_csv(path, Mode.CATE)
    assert sample.n_rows == 2 and sample.n_cols == 2 and sample.n_covariates == 1
    assert sample.outcomes[0, 1] == 2.0
    assert sample.cell(1, 0).covariates[0] == 0.3


def test_load_csv_duplicate_cell(tmp_path):
    path = _write(tmp_path, "row_id,col_id,y,t,w1\n" "1,1,1.0,1,0.1\n" "1,1,2.0,0,0.2\n")
    with pytest.raises(DuplicateCell):
        load_csv(path, Mode.CATE)


def test_load_csv_nonbinary_treatment(tmp_path):
    path = _write(tmp_path, "row_id,col_id,y,t,w1\n" "1,1,1.0,0.5,0.1\n" "1,2,2.0,0,0.2\n"
                  "2,1,1.0,1,0.1\n" "2,2,2.0,0,0.2\n")
    with pytest.raises(InvalidTreatment):
        load_csv(path, Mode.CATE)


def test_load_csv_missing_cell(tmp_path):
    path = _write(tmp_path, "row_id,col_id,y,t,w1\n" "1,1,1.0,1,0.1\n" "1,2,2.0,0,0.2\n"
                  "2,1,3.0,1,0.3\n")
    with pytest.raises(IncompleteGrid):
        load_csv(path, Mode.CATE)


def test_load_csv_ragged_row_names_line(tmp_path):
    path = _write(tmp_path, "row_id,col_id,y,t,w1\n" "1,1,1.0,1\n")
    with pytest.raises(SchemaError, match=":2"):
        load_csv(path, Mode.CATE)


def test_load_csv_bad_float_names_line(tmp_path):
    path = _write(tmp_path, "row_id,col_id,y,t,w1\n" "1,1,oops,1,0.1\n")
    with pytest.raises(SchemaError, match=":2"):
        load_csv(path, Mode.CATE)


def test_load_csv_missing_column(tmp_path):
    path = _write(tmp_path, "row_id,col_id,y,w1\n" "1,1,1.0,0.1\n")
    with pytest.raises(SchemaError, match="'t'"):
        load_csv(path, Mode.CATE)


def test_csv_round_trip_is_identity(tmp_path):
    sample, _ = simulate_cate(DgpConfigCATE(n_rows=4, n_cols=3, dim=2), seed=9)
    path = tmp_path / "rt.csv"
    write_csv(sample, path)
    back = load_csv(path, Mode.CATE)
    np.testing.assert_array_equal(back.outcomes, sample.outcomes)
    np.testing.assert_array_equal(back.treatments, sample.treatments)
    np.testing.assert_array_equal(back.covariates, sample.covariates)


def test_sample_requires_min_size():
    with pytest.raises(SchemaError):
        TwoWaySample(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 3, 1)), Mode.CATE)


def test_conditioning_values_by_mode():
    s = make_sample(mode=Mode.CATE)
    np.testing.assert_array_equal(s.conditioning_values, s.covariates[:, :, 0])
    s2 = make_sample(mode=Mode.CTE)
    np.testing.assert_array_equal(s2.conditioning_values, s2.treatments)


def test_partition_balance_4x4():
    folds = partition_folds(make_sample(4, 4), 2, seed=3)
    assert sorted(len(f) for f in folds.row_folds) == [2, 2]
    assert sorted(len(f) for f in folds.col_folds) == [2, 2]


def test_partition_remainder_spread():
    folds = partition_folds(make_sample(5, 4), 2, seed=3)
    assert sorted(len(f) for f in folds.row_folds) == [2, 3]


def test_partition_deterministic():
    s = make_sample(6, 7)
    a = partition_folds(s, 3, seed=11)
    b = partition_folds(s, 3, seed=11)
    for fa, fb in zip(a.row_folds + a.col_folds, b.row_folds + b.col_folds):
        np.testing.assert_array_equal(fa, fb)


def test_partition_invalid_counts():
    s = make_sample(4, 4)
    for k in (1, 5):
        with pytest.raises(InvalidFoldCount):
            partition_folds(s, k, seed=0)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(3, 12), m=st.integers(3, 12), k=st.integers(2, 3),
       seed=st.integers(0, 2**32 - 1))
def test_partition_is_set_partition(n, m, k, seed):
    if k > min(n, m):
        return
    folds = partition_folds(make_sample(max(n, 2), max(m, 2)), k, seed)
    rows = np.concatenate(folds.row_folds)
    cols = np.concatenate(folds.col_folds)
    assert sorted(rows.tolist()) == list(range(max(n, 2)))
    assert sorted(cols.tolist()) == list(range(max(m, 2)))
    sizes_r = [len(f) for f in folds.row_folds]
    sizes_c = [len(f) for f in folds.col_folds]
    assert max(sizes_r) - min(sizes_r) <= 1
    assert max(sizes_c) - min(sizes_c) <= 1


def test_quantile_grid_full_range():
    g = quantile_grid(np.arange(101.0), 0.0, 1.0, 3)
    np.testing.assert_allclose(g.points, [0.0, 50.0, 100.0])


def test_quantile_grid_interpolated():
    g = quantile_grid(np.arange(101.0), 0.2, 0.8, 2)
    np.testing.assert_allclose(g.points, [20.0, 80.0])


def test_quantile_grid_degenerate():
    g = quantile_grid(np.array([5.0]), 0.01, 0.99, 1)
    np.testing.assert_allclose(g.points, [5.0])


def test_quantile_grid_empty():
    with pytest.raises(EmptyInput):
        quantile_grid(np.array([]), 0.0, 1.0, 3)


def test_quantile_grid_monotone_in_hi(rng):
    values = rng.standard_normal(400)
    his = [0.5, 0.6, 0.7, 0.8, 0.95]
    grids = [quantile_grid(values, 0.1, hi, 7).points for hi in his]
    for g1, g2 in zip(grids, grids[1:]):
        assert np.all(g2 >= g1 - 1e-12)


def test_view_materializes_only_selected_cells():
    s = make_sample(5, 6, d=2)
    view = s.view(np.array([0, 2]), np.array([1, 3, 4]))
    assert view.n_obs == 6
    np.testing.assert_array_equal(
        view.outcomes, s.outcomes[np.ix_([0, 2], [1, 3, 4])].ravel()
    )
