import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from treepin.data import (Dataset, Feature, FeatureSchema, IngestionError, Scaler, apply_scalers,
                          fit_apply_scalers, load_csv, split, write_csv)

from conftest import mixed_schema


def _schema2():
    return FeatureSchema((Feature("x", "continuous"), Feature("c", "categorical", ("A", "B", "C"))),
                         exposure="exposure", response="freq")


def _write(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_load_valid_csv(tmp_path):
    path = _write(tmp_path, "x,c,exposure,freq\n0.5,A,1.0,0\n1.5,C,0.5,2\n-3,B,0.25,4\n")
    ds = load_csv(path, _schema2())
    assert len(ds) == 3
    np.testing.assert_array_equal(ds.X[:, 1], [1, 3, 2])
    np.testing.assert_allclose(ds.N, [0, 1, 1])
    np.testing.assert_allclose(ds.Y, [0, 2, 4])


def test_count_column_takes_precedence(tmp_path):
    schema = FeatureSchema((Feature("x", "continuous"), Feature("y", "continuous")), "v", "freq", count="n")
    ds = load_csv(_write(tmp_path, "x,y,v,n\n1,2,0.5,3\n"), schema)
    assert ds.N[0] == 3 and ds.Y[0] == 6


def test_unknown_level(tmp_path):
    path = _write(tmp_path, "x,c,exposure,freq\n0.5,A,1.0,0\n0.1,Z,1.0,0\n")
    with pytest.raises(IngestionError, match="row 2: unknown level Z in column c"):
        load_csv(path, _schema2())


def test_non_positive_exposure(tmp_path):
    path = _write(tmp_path, "x,c,exposure,freq\n0.5,A,0,0\n")
    with pytest.raises(IngestionError, match="non-positive exposure"):
        load_csv(path, _schema2())


def test_non_numeric_continuous(tmp_path):
    path = _write(tmp_path, "x,c,exposure,freq\nabc,A,1,0\n")
    with pytest.raises(IngestionError, match="non-numeric"):
        load_csv(path, _schema2())


def test_missing_column(tmp_path):
    with pytest.raises(IngestionError, match="missing"):
        load_csv(_write(tmp_path, "x,exposure,freq\n1,1,0\n"), _schema2())


def test_csv_round_trip(tmp_path, rng):
    schema = mixed_schema()
    X = np.column_stack([rng.uniform(0, 9, 20), rng.integers(1, 4, 20), rng.normal(size=20), rng.integers(1, 3, 20)])
    ds = Dataset(X, rng.poisson(1.0, 20).astype(float), rng.uniform(0.1, 1, 20), schema)
    write_csv(ds, tmp_path / "rt.csv")
    back = load_csv(tmp_path / "rt.csv", schema)
    np.testing.assert_array_equal(back.X, ds.X)
    np.testing.assert_array_equal(back.N, ds.N)
    np.testing.assert_array_equal(back.v, ds.v)


def test_schema_json_round_trip(tmp_path):
    schema = mixed_schema()
    (tmp_path / "s.json").write_text(json.dumps(schema.to_dict()))
    assert FeatureSchema.from_json(tmp_path / "s.json") == schema


@pytest.mark.parametrize("feats", [
    (Feature("a", "continuous"),),
    (Feature("a", "continuous"), Feature("a", "continuous")),
])
def test_schema_invariants(feats):
    with pytest.raises(ValueError):
        FeatureSchema(feats, "v", "y")


@pytest.mark.parametrize("levels", [(), ("A", "A")])
def test_bad_levels(levels):
    with pytest.raises(ValueError):
        Feature("c", "categorical", levels)


def _cont(values):
    schema = FeatureSchema((Feature("a", "continuous"), Feature("b", "continuous")), "v", "y")
    values = np.asarray(values, dtype=float)
    X = np.column_stack([values, np.linspace(0, 1, len(values))])
    return Dataset(X, np.zeros(len(values)), np.ones(len(values)), schema)


def test_scaling_examples():
    scaled, sc = fit_apply_scalers(_cont([0, 10]))
    np.testing.assert_array_equal(scaled.X[:, 0], [-1, 1])
    scaled, sc = fit_apply_scalers(_cont([0, 5, 10]))
    np.testing.assert_array_equal(scaled.X[:, 0], [-1, 0, 1])
    assert sc["a"].apply(np.array([20.0]))[0] == 3.0


def test_constant_column_rejected():
    with pytest.raises(ValueError, match="constant"):
        fit_apply_scalers(_cont([4, 4, 4]))
    with pytest.raises(ValueError):
        Scaler(1.0, 1.0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=50, unique=True))
def test_scaled_range_and_reapplication(values):
    ds = _cont(values)
    scaled, sc = fit_apply_scalers(ds)
    assert scaled.X[:, 0].min() == -1.0 and scaled.X[:, 0].max() == 1.0
    assert np.all(np.abs(scaled.X) <= 1.0)
    np.testing.assert_array_equal(apply_scalers(ds, sc).X, scaled.X)


def test_categorical_columns_not_scaled(rng):
    schema = mixed_schema()
    X = np.column_stack([rng.uniform(0, 9, 30), rng.integers(1, 4, 30), rng.normal(size=30), rng.integers(1, 3, 30)])
    scaled, sc = fit_apply_scalers(Dataset(X, np.zeros(30), np.ones(30), schema))
    np.testing.assert_array_equal(scaled.X[:, [1, 3]], X[:, [1, 3]])
    assert set(sc) == {"age", "power"}


def _rows(n):
    return _cont(np.arange(n, dtype=float))


def test_split_sizes_and_determinism():
    tr, va = split(_rows(100), 0.1, seed=3)
    assert (len(tr), len(va)) == (90, 10)
    tr2, va2 = split(_rows(100), 0.1, seed=3)
    np.testing.assert_array_equal(va.X, va2.X)
    _, va3 = split(_rows(100), 0.1, seed=4)
    assert not np.array_equal(va.X, va3.X)


def test_split_learning_data_size():
    n = 610_206
    schema = FeatureSchema((Feature("a", "continuous"), Feature("b", "continuous")), "v", "y")
    ds = Dataset(np.zeros((n, 2)), np.zeros(n), np.ones(n), schema)
    _, va = split(ds, 0.1, seed=1)
    assert abs(len(va) - 61_021) <= 1


@given(st.integers(2, 300), st.floats(0.01, 0.99), st.integers(0, 2**32 - 1))
def test_split_partition(n, frac, seed):
    ds = _rows(n)
    tr, va = split(ds, frac, seed)
    assert abs(len(va) - n * frac) <= 1
    merged = np.sort(np.concatenate([tr.X[:, 0], va.X[:, 0]]))
    np.testing.assert_array_equal(merged, np.arange(n))


def test_split_rejects_bad_fraction():
    with pytest.raises(ValueError):
        split(_rows(10), 1.0, 0)


def test_dataset_invariants():
    schema = FeatureSchema((Feature("a", "continuous"), Feature("b", "continuous")), "v", "y")
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.zeros(2), np.array([1.0, 0.0]), schema)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.array([-1.0, 0.0]), np.ones(2), schema)
