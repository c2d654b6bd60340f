import os
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from disentangled_influence.datasets import (
    XY_COLUMNS,
    TabularDataset,
    gen_xy_synthetic,
    load_adult_raw,
    load_csv,
    preprocess_adult,
    write_csv,
    xy_fixed_model,
)

ADULT_DIR = Path(os.environ.get("ADULT_DATA_DIR", Path.home() / "data" / "adult"))
needs_adult = pytest.mark.skipif(not (ADULT_DIR / "adult.data").exists(),
                                 reason="UCI Adult files not available")


def test_xy_shape_and_identities():
    d = gen_xy_synthetic(5000, 0)
    assert d.values.shape == (5000, 9)
    assert d.feature_names == XY_COLUMNS
    for base in ("x", "y", "c"):
        v = d.column(base)
        assert np.array_equal(d.column("2" + base), 2 * v)
        assert np.array_equal(d.column(base + "^2"), v * v)
        assert v.min() >= 0 and v.max() <= 1
    assert np.all(d.labels - (d.column("x") + d.column("y")) == 0)


def test_xy_is_deterministic():
    a, b = gen_xy_synthetic(300, 7), gen_xy_synthetic(300, 7)
    assert np.array_equal(a.values, b.values) and np.array_equal(a.split, b.split)
    assert not np.array_equal(a.values, gen_xy_synthetic(300, 8).values)


def test_xy_split():
    d = gen_xy_synthetic(5000, 0)
    assert len(d.train.values) == 4000 and len(d.test.values) == 1000


def test_fixed_model():
    m = xy_fixed_model()
    row = np.array([[0.2, 9, 9, 0.7, -3, 5, 1, 1, 1]], dtype=float)
    assert m(row)[0, 0] == pytest.approx(0.9, abs=1e-15)
    assert m(np.zeros((1, 9)))[0, 0] == 0.0
    other = row.copy()
    other[0, [1, 2, 4, 5, 6, 7, 8]] = np.random.default_rng(0).normal(size=7)
    assert m(other)[0, 0] == m(row)[0, 0]


def test_dataset_rejects_duplicate_names():
    with pytest.raises(ValueError):
        TabularDataset(["a", "a"], np.zeros((2, 2)), np.zeros(2))


def test_dataset_checks_one_hot_groups():
    with pytest.raises(ValueError):
        TabularDataset(["g_a", "g_b"], [[1, 1], [0, 1]], [0, 0], ["one_hot:g", "one_hot:g"])


def test_dataset_save_load_round_trip(tmp_path):
    d = gen_xy_synthetic(200, 1)
    d.save(tmp_path)
    back = TabularDataset.load(tmp_path)
    assert np.array_equal(back.values, d.values)
    assert np.array_equal(back.labels, d.labels)
    assert list(back.split) == list(d.split)


def test_csv_round_trip_bit_exact(tmp_path):
    rows = np.random.default_rng(0).normal(size=(20, 3)) * 1e-3
    write_csv(tmp_path / "t.csv", ["a", "b", "c"], rows)
    back = load_csv(tmp_path / "t.csv", {"a": "numeric", "b": "numeric", "c": "numeric"})
    assert np.array_equal(back.to_numpy(), rows)


def test_csv_empty_file_is_an_error(tmp_path):
    (tmp_path / "e.csv").write_text("")
    with pytest.raises(ValueError, match="empty"):
        load_csv(tmp_path / "e.csv")


def test_csv_bad_row_reports_line(tmp_path):
    (tmp_path / "b.csv").write_text("a,b\n1,2\n3,oops\n")
    with pytest.raises(ValueError, match=":3:"):
        load_csv(tmp_path / "b.csv", {"a": "numeric", "b": "numeric"})
    (tmp_path / "c.csv").write_text("a,b\n1,2\n3\n")
    with pytest.raises(ValueError, match=":3:"):
        load_csv(tmp_path / "c.csv")


def test_csv_unknown_column_is_an_error(tmp_path):
    (tmp_path / "u.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="unknown"):
        load_csv(tmp_path / "u.csv", {"zzz": "numeric"})


def test_csv_records_missing_tokens(tmp_path):
    (tmp_path / "m.csv").write_text("a,b\nx,?\n?,?\n")
    df = load_csv(tmp_path / "m.csv")
    assert df.attrs["missing"] == {"a": 1, "b": 2}


def _toy_adult(n, seed):
    rng = np.random.default_rng(seed)
    return pd.DataFrame({
        "age": rng.integers(18, 80, n).astype(float),
        "workclass": rng.choice(["Private", "State-gov", "?", "Never-worked"], n, p=[0.6, 0.3, 0.095, 0.005]),
        "fnlwgt": rng.uniform(1e4, 1e6, n),
        "education": rng.choice(["HS-grad", "Bachelors"], n),
        "education_num": rng.integers(1, 16, n).astype(float),
        "marital_status": rng.choice(["Married", "Never-married"], n),
        "occupation": rng.choice(["Sales", "Tech"], n),
        "relationship": rng.choice(["Husband", "Wife", "Own-child"], n),
        "race": rng.choice(["White", "Black"], n),
        "sex": rng.choice(["Male", "Female"], n),
        "capital_gain": rng.exponential(100, n),
        "capital_loss": rng.exponential(10, n),
        "hours_per_week": rng.integers(10, 60, n).astype(float),
        "native_country": rng.choice(["United-States", "Mexico"], n, p=[0.9, 0.1]),
        "income": rng.choice(["<=50K", ">50K"], n),
    })


def test_preprocess_toy_adult():
    train, test = _toy_adult(12000, 0), _toy_adult(3000, 1)
    data, report = preprocess_adult(train, test)
    assert "education_num" not in data.feature_names
    assert "workclass_rare_value" in data.feature_names
    assert "workclass_Never-worked" not in data.feature_names
    tr = data.train
    for col in report.numeric_stats:
        v = tr.column(col)
        assert abs(v.mean()) < 1e-9 and abs(v.std() - 1) < 1e-9
    for cols in data.one_hot_groups().values():
        assert np.all(data.values[:, cols].sum(axis=1) == 1.0)
    # replaying the report reproduces the processed test split exactly
    assert np.array_equal(report.transform(test), data.test.values)
    assert np.array_equal(report.labels(test), data.test.labels)


def test_preprocess_rejects_degenerate_categorical():
    train, test = _toy_adult(3000, 0), _toy_adult(500, 1)
    train["race"] = "White"
    with pytest.raises(ValueError, match="race"):
        preprocess_adult(train, test)


def test_preprocess_threshold_uses_train_only():
    train, test = _toy_adult(12000, 0), _toy_adult(3000, 1)
    test.loc[:, "workclass"] = "Never-worked"  # common in test, rare in train
    data, _ = preprocess_adult(train, test)
    assert np.all(data.test.column("workclass_rare_value") == 1.0)


@needs_adult
def test_adult_raw_counts():
    raw = load_adult_raw(ADULT_DIR / "adult.data")
    assert raw.shape == (32561, 15)
    test = load_adult_raw(ADULT_DIR / "adult.test")
    assert test.shape == (16281, 15)
    assert set(test["income"]) == {"<=50K", ">50K"}


@needs_adult
def test_adult_preprocessing_invariants():
    data, report = preprocess_adult(load_adult_raw(ADULT_DIR / "adult.data"),
                                    load_adult_raw(ADULT_DIR / "adult.test"))
    tr = data.train
    for col in report.numeric_stats:
        assert abs(tr.column(col).mean()) < 1e-9 and abs(tr.column(col).std() - 1) < 1e-9
    for cols in data.one_hot_groups().values():
        assert np.all(data.values[:, cols].sum(axis=1) == 1.0)
    assert {"sex_Male", "sex_Female"} <= set(data.feature_names)
