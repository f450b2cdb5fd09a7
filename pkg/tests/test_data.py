import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from eqcov.data import (
    SYNTHETIC_PRESETS,
    Dataset,
    SyntheticSpec,
    TableSchema,
    bundled_sample_path,
    conditional_quantile,
    fit_standardizer,
    generate_synthetic,
    load_table,
    sample_group,
    split_train_calibration,
    split_train_test,
    transform_response,
)
from eqcov.exceptions import ConfigError, DataError

SCHEMA = TableSchema(("a", "b"), "g", "y")


def write(tmp_path, text, name="t.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestLoadTable:
    def test_three_rows_two_features(self, tmp_path):
        path = write(tmp_path, "a,b,g,y\n1,2,0,3\n4,5,1,6\n7,8,0,9\n")
        ds = load_table(path, SCHEMA)
        assert (ds.n, ds.feature_dim) == (3, 2)
        assert ds.skipped == 0
        np.testing.assert_array_equal(ds.X, [[1, 2], [4, 5], [7, 8]])
        np.testing.assert_array_equal(ds.group, [0, 1, 0])
        np.testing.assert_array_equal(ds.y, [3, 6, 9])

    def test_malformed_row_is_skipped_and_counted(self, tmp_path):
        path = write(tmp_path, "a,b,g,y\n1,2,0,3\n4,,1,6\n7,8,0,9\n1,1,1,1\n")
        ds = load_table(path, SCHEMA)
        assert ds.n == 3
        assert ds.skipped == 1

    @pytest.mark.parametrize(
        "bad_row",
        ["x,2,0,3", "1,2,-1,3", "1,2,0.5,3", "1,2,0,nan", "1,2,0", "1,2,0,3,4", "1,2,zz,3"],
    )
    def test_rejections(self, tmp_path, bad_row):
        path = write(tmp_path, f"a,b,g,y\n1,2,0,3\n{bad_row}\n")
        ds = load_table(path, SCHEMA)
        assert (ds.n, ds.skipped) == (1, 1)

    def test_extra_columns_ignored(self, tmp_path):
        path = write(tmp_path, "id,a,b,g,y,note\nr1,1,2,0,3,hello\n")
        ds = load_table(path, SCHEMA)
        assert ds.n == 1 and ds.feature_names == ("a", "b")

    def test_group_map(self, tmp_path):
        path = write(tmp_path, "a,b,g,y\n1,2,white,3\n4,5,nonwhite,6\n7,8,other,1\n")
        ds = load_table(path, TableSchema(("a", "b"), "g", "y", {"white": 1, "nonwhite": 0}))
        np.testing.assert_array_equal(ds.group, [1, 0])
        assert ds.skipped == 1

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="no such file"):
            load_table(tmp_path / "nope.csv", SCHEMA)

    def test_schema_mismatch(self, tmp_path):
        path = write(tmp_path, "a,c,g,y\n1,2,0,3\n")
        with pytest.raises(DataError, match="b"):
            load_table(path, SCHEMA)

    def test_zero_usable_rows(self, tmp_path):
        path = write(tmp_path, "a,b,g,y\n1,,0,3\n")
        with pytest.raises(DataError, match="zero usable rows"):
            load_table(path, SCHEMA)

    def test_schema_validation(self):
        with pytest.raises(ConfigError):
            TableSchema((), "g", "y")
        with pytest.raises(ConfigError):
            TableSchema(("g",), "g", "y")

    def test_bundled_sample(self):
        ds = load_table(bundled_sample_path(), TableSchema(("x0", "x1"), "group", "y"))
        assert ds.n == 600 and ds.labels == (0, 1)
        assert "n=600" in ds.summary()


def test_summary_report():
    ds = Dataset(np.zeros((5, 2)), [0, 1, 1, 0, 1], np.arange(5.0))
    assert ds.summary() == "n=5\np=2\nskipped=0\ngroup[0]=2\ngroup[1]=3\n"


def test_dataset_invariants():
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 2)), [0, 1], [1, 2, 3])
    with pytest.raises(DataError):
        Dataset(np.array([[np.nan]]), [0], [1])
    with pytest.raises(DataError):
        Dataset(np.zeros((1, 1)), [-1], [1])
    ds = Dataset(np.zeros((3, 1)), [2, 0, 2], [1, 2, 3])
    assert ds.labels == (0, 2)
    s = ds.sample(1)
    assert s.group == 0 and s.response == 2.0
    with pytest.raises(ValueError):
        ds.X[0, 0] = 1.0  # immutable


class TestTransformResponse:
    def test_values(self):
        assert transform_response(0.0) == 0.0
        assert transform_response(math.e - 1) == pytest.approx(1.0, abs=1e-15)
        # log(11) to machine precision
        assert transform_response(10.0) == pytest.approx(2.3978952727983707, rel=1e-15)

    def test_negative_rejected(self):
        with pytest.raises(DataError):
            transform_response(-0.5)
        with pytest.raises(DataError):
            transform_response([1.0, -1.0])

    @given(st.floats(0, 1e12), st.floats(0, 1e12))
    def test_monotone(self, a, b):
        a, b = sorted((a, b))
        assert transform_response(a) <= transform_response(b)
        if b > a * (1 + 1e-9) + 1e-12:
            assert transform_response(a) < transform_response(b)


class TestStandardizer:
    def test_closed_form(self):
        ds = Dataset(np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]), [0, 0, 0], [0, 0, 0])
        st_ = fit_standardizer(ds)
        np.testing.assert_allclose(st_.mean, [2.0, 5.0])
        # population std of {1, 2, 3}
        assert st_.scale[0] == pytest.approx(math.sqrt(2.0 / 3.0), rel=1e-15)
        assert st_.scale[1] == 1.0
        np.testing.assert_array_equal(st_.constant, [False, True])
        np.testing.assert_array_equal(st_.transform(ds.X)[:, 1], 0.0)

    def test_uses_only_given_indices(self):
        ds = Dataset(np.array([[0.0], [10.0], [1000.0]]), [0, 0, 0], [0, 0, 0])
        st_ = fit_standardizer(ds, [0, 1])
        assert st_.mean[0] == 5.0 and st_.scale[0] == 5.0

    def test_already_standardized(self):
        rng = np.random.default_rng(0)
        Z = rng.standard_normal((500, 3))
        Z = (Z - Z.mean(0)) / Z.std(0)
        st_ = fit_standardizer(Dataset(Z, np.zeros(500), np.zeros(500)))
        np.testing.assert_allclose(st_.mean, 0.0, atol=1e-12)
        np.testing.assert_allclose(st_.scale, 1.0, atol=1e-12)

    def test_empty(self):
        ds = Dataset(np.zeros((3, 1)), [0, 0, 0], [0, 0, 0])
        with pytest.raises(DataError):
            fit_standardizer(ds, [])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.integers(2, 40), st.integers(1, 5))
    def test_round_trip(self, seed, n, p):
        rng = np.random.default_rng(seed)
        X = rng.normal(rng.normal(0, 100, p), rng.uniform(0.01, 50, p), (n, p))
        st_ = fit_standardizer(Dataset(X, np.zeros(n), np.zeros(n)))
        back = st_.inverse_transform(st_.transform(X))
        np.testing.assert_allclose(back, X, rtol=1e-10, atol=1e-10 * np.abs(X).max())

    def test_dict_round_trip(self):
        ds = Dataset(np.array([[1.0, 5.0], [2.0, 5.0]]), [0, 0], [0, 0])
        st_ = fit_standardizer(ds)
        back = type(st_).from_dict(st_.to_dict())
        np.testing.assert_array_equal(back.mean, st_.mean)
        np.testing.assert_array_equal(back.constant, st_.constant)


class TestSplits:
    def test_half_split(self):
        s = split_train_calibration(10, 0.5, seed=3)
        assert len(s.proper_train) == 5 and len(s.calibration) == 5
        assert not set(s.proper_train) & set(s.calibration)

    def test_deterministic(self):
        a = split_train_calibration(10, 0.5, seed=3)
        b = split_train_calibration(10, 0.5, seed=3)
        np.testing.assert_array_equal(a.calibration, b.calibration)
        c = split_train_calibration(1000, 0.5, seed=4)
        d = split_train_calibration(1000, 0.5, seed=3)
        assert not np.array_equal(c.calibration, d.calibration)

    def test_floor_rule(self):
        assert len(split_train_calibration(10, 0.3, 0).calibration) == 3
        assert len(split_train_calibration(11, 0.5, 0).calibration) == 5

    def test_empty_part(self):
        with pytest.raises(ConfigError):
            split_train_calibration(3, 0.2, 0)
        with pytest.raises(ConfigError):
            split_train_calibration(3, 1.0, 0)

    @given(st.integers(2, 300), st.floats(0.01, 0.99), st.integers(0, 1000))
    def test_partition_property(self, n, f, seed):
        m = math.floor(n * f + 1e-9)
        if m in (0, n):
            return
        s = split_train_calibration(n, f, seed)
        assert len(s.calibration) == m
        assert len(s.proper_train) + len(s.calibration) == n
        assert set(s.proper_train) | set(s.calibration) == set(range(n))

    def test_train_test(self):
        tr, te = split_train_test(100, 0.8, 1)
        assert len(tr) == 80 and len(te) == 20
        assert set(tr) | set(te) == set(range(100))

    def test_accepts_dataset(self):
        ds = Dataset(np.zeros((8, 1)), np.zeros(8), np.zeros(8))
        assert len(split_train_calibration(ds, 0.5, 0).calibration) == 4


class TestSynthetic:
    def test_single_group_mean(self):
        n = 20_000
        ds = generate_synthetic(SyntheticSpec(n=n), seed=0)
        # CLT bound for a standard normal mean
        assert abs(ds.y.mean()) < 4 / math.sqrt(n)

    def test_group_proportions(self):
        n = 10_000
        spec = SyntheticSpec((0.8, 0.2), ("zero", "zero"), ("const", "const"), n=n)
        ds = generate_synthetic(spec, seed=1)
        assert abs((ds.group == 1).sum() - 2000) < 3 * math.sqrt(n * 0.2 * 0.8)

    def test_noiseless(self):
        spec = SyntheticSpec(means=("sine",), scales=("zero",), n=100)
        ds = generate_synthetic(spec, seed=2)
        np.testing.assert_array_equal(ds.y, np.sin(2 * np.pi * ds.X[:, 0]))

    def test_deterministic(self):
        spec = SYNTHETIC_PRESETS["two-group"]
        a, b = generate_synthetic(spec, 5), generate_synthetic(spec, 5)
        np.testing.assert_array_equal(a.y, b.y)

    def test_include_group_column(self):
        ds = generate_synthetic(SYNTHETIC_PRESETS["hetero"], 0)
        assert ds.feature_dim == 3
        np.testing.assert_array_equal(ds.X[:, -1], ds.group)

    @pytest.mark.parametrize("bad", [
        dict(proportions=(0.5, 0.4), means=("zero",) * 2, scales=("const",) * 2),
        dict(proportions=(1.0,), means=("nope",)),
        dict(proportions=(1.0,), noise=(-1.0,)),
        dict(n=0),
        dict(proportions=(0.5, 0.5)),
    ])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            SyntheticSpec(**bad)

    def test_analytic_quantile_closed_form(self):
        spec = SyntheticSpec((0.5, 0.5), ("linear", "zero"), ("linear", "const"), noise=(2.0, 1.0), offsets=(1.0, 0.0))
        x = np.array([[0.25]])
        expected = 1.0 + 2 * 0.25 + 2.0 * (0.1 + 2 * 0.25) * norm.ppf(0.9)
        assert conditional_quantile(spec, x, 0, 0.9)[0] == pytest.approx(expected, rel=1e-14)

    @pytest.mark.parametrize("level", [0.05, 0.5, 0.95])
    def test_oracle_consistency(self, level):
        # empirical conditional quantiles in a thin x-slab match the analytic ones
        spec = SyntheticSpec((0.7, 0.3), ("linear", "sine"), ("linear", "const"), noise=(1.0, 2.0))
        rng = np.random.default_rng(11)
        for a in (0, 1):
            X, y = sample_group(spec, a, 100_000, rng)
            z = (y - spec.location(X, a)) / spec.spread(X, a)
            # standardised residuals are exactly N(0,1): compare their empirical quantile
            assert np.quantile(z, level) == pytest.approx(norm.ppf(level), abs=0.02)
            # and the analytic conditional quantile is hit at the right rate
            below = y <= conditional_quantile(spec, X, a, level)
            assert below.mean() == pytest.approx(level, abs=0.02)
