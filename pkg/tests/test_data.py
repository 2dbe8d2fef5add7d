import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from powerformer.data import (
    SYNTHETIC,
    DataError,
    RawDataset,
    SplitSpec,
    WindowedDataset,
    autocorrelation_by_lag,
    default_splits,
    load_csv,
    sine_mixture,
    split_and_standardize,
    split_scheme,
    write_autocorr_csv,
    write_csv,
)


class TestLoad:
    def test_small_fixture(self, tmp_path):
        p = tmp_path / "tiny.csv"
        p.write_text("date,a,b\n2020-01-01 00:00,1,2\n2020-01-01 01:00,3,4.5\n2020-01-01 02:00,-1,0\n")
        ds = load_csv(p)
        assert ds.shape == (3, 2)
        assert ds.columns == ["a", "b"]
        assert ds.timestamps[1] == "2020-01-01 01:00"
        np.testing.assert_array_equal(ds.values[1], [3.0, 4.5])

    def test_no_date_column(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("a,b\n1,2\n3,4\n")
        assert load_csv(p).timestamps is None

    def test_blank_cell_named(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("date,a,b\nt0,1,2\nt1,,4\nt2,5,6\n")
        with pytest.raises(DataError, match=r"1 row.*line 3.*'a'"):
            load_csv(p)

    def test_non_numeric(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,b\n1,x\n2,y\n")
        with pytest.raises(DataError, match=r"2 row.*line 2.*'b'"):
            load_csv(p)

    @pytest.mark.parametrize("text", ["", "a,b\n"])
    def test_empty(self, tmp_path, text):
        p = tmp_path / "e.csv"
        p.write_text(text)
        with pytest.raises(DataError):
            load_csv(p)

    def test_missing(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_csv(tmp_path / "nope.csv")

    def test_write_round_trip(self, tmp_path):
        ds = sine_mixture(50, 2, seed=3)
        write_csv(ds, tmp_path / "s.csv")
        back = load_csv(tmp_path / "s.csv")
        np.testing.assert_array_equal(back.values, ds.values)


class TestSplits:
    def test_etth_borders(self):
        s = default_splits(17420, 336, "etth")
        assert s.train == (0, 8640)
        assert s.val == (8640 - 336, 8640 + 2880)
        assert s.test == (11520 - 336, 14400)

    def test_ettm_borders(self):
        s = default_splits(69680, 96, "ettm")
        assert s.train == (0, 34560) and s.test[1] == 57600

    def test_ratio_borders(self):
        s = default_splits(1000, 100, "ratio")
        assert s.train == (0, 700) and s.val == (600, 800) and s.test == (700, 1000)

    def test_scheme_names(self):
        assert [split_scheme(n) for n in ("ETTh1", "ettm2", "weather")] == ["etth", "ettm", "ratio"]

    def test_too_short(self):
        with pytest.raises(DataError):
            default_splits(100, 90, "ratio")
        with pytest.raises(DataError):
            default_splits(1000, 10, "etth")

    def test_train_only_stats(self, rng):
        values = rng.normal(5, 3, size=(1000, 3))
        values[800:] += 100  # test-period shift must not leak into the statistics
        sp = split_and_standardize(values, default_splits(1000, 50))
        assert np.all(np.abs(sp.train.mean(0)) < 1e-10)
        assert np.all(np.abs(sp.train.std(0) - 1) < 1e-10)
        np.testing.assert_allclose(sp.mean, values[:700].mean(0))

    def test_identity_stats(self):
        v = np.array([[-1.0], [1.0], [-1.0], [1.0]])
        sp = split_and_standardize(v, SplitSpec((0, 4), (0, 4), (0, 4)))
        np.testing.assert_array_equal(sp.test, v)

    def test_constant_channel(self):
        v = np.ones((20, 1))
        sp = split_and_standardize(v, default_splits(20, 2))
        assert sp.std[0] == 1e-5 and not np.any(sp.test)


class TestWindows:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(5, 80), st.integers(1, 10), st.integers(1, 10))
    def test_counts_and_bounds(self, T, seq, pred):
        data = np.arange(T * 2, dtype=float).reshape(T, 2)
        if T - seq - pred + 1 < 1:
            with pytest.raises(DataError):
                WindowedDataset(data, seq, pred)
            return
        w = WindowedDataset(data, seq, pred)
        assert len(w) == T - seq - pred + 1
        assert sum(1 for _ in w.examples()) == len(w) * 2
        x, y = w[len(w) - 1]
        assert y[0, -1] == data[-1, 0]

    def test_batch_matches_getitem(self, rng):
        w = WindowedDataset(rng.normal(size=(40, 3)), 10, 4)
        xb, yb = w.batch([0, 7, 26])
        for b, k in enumerate([0, 7, 26]):
            x, y = w[k]
            np.testing.assert_array_equal(xb[b], x)
            np.testing.assert_array_equal(yb[b], y)
        assert xb.shape == (3, 3, 10) and yb.shape == (3, 3, 4)

    def test_target_follows_input(self):
        data = np.arange(20, dtype=float)[:, None]
        x, y = WindowedDataset(data, 5, 3)[2]
        np.testing.assert_array_equal(x[0], [2, 3, 4, 5, 6])
        np.testing.assert_array_equal(y[0], [7, 8, 9])

    def test_no_leakage_across_splits(self):
        T, seq, pred = 1000, 50, 20
        spec = default_splits(T, seq)
        sp = split_and_standardize(np.arange(T, dtype=float)[:, None], spec)
        train = WindowedDataset(sp.train, seq, pred)
        _, y = train[len(train) - 1]
        last_label = y[0, -1] * sp.std[0] + sp.mean[0]
        assert last_label < spec.train[1]
        test = WindowedDataset(sp.test, seq, pred)
        x, y = test[0]
        first_target = y[0, 0] * sp.std[0] + sp.mean[0]
        assert first_target == pytest.approx(spec.val[1])

    def test_iter_batches_covers_order(self, rng):
        w = WindowedDataset(rng.normal(size=(30, 1)), 5, 2)
        seen = np.concatenate([xb[:, 0, 0] for xb, _ in w.iter_batches(7)])
        assert len(seen) == len(w)


class TestAutocorr:
    def test_lag_zero_is_one(self, rng):
        c = autocorrelation_by_lag(rng.normal(size=(100, 3)), 5)
        np.testing.assert_allclose(c[:, 0], 1.0, atol=1e-12)

    def test_sine_period(self):
        t = np.arange(2400)
        c = autocorrelation_by_lag(np.sin(2 * np.pi * t / 24), 30)[0]
        assert c[24] > 0.999 and c[12] < -0.999

    def test_white_noise(self):
        x = np.random.default_rng(0).standard_normal(10000)
        c = autocorrelation_by_lag(x, 50)[0]
        assert np.all(np.abs(c[1:]) < 0.1)

    def test_matches_numpy_corrcoef(self, rng):
        x = rng.normal(size=200).cumsum()
        c = autocorrelation_by_lag(x, 10)[0]
        for lag in (1, 5, 10):
            assert abs(c[lag] - np.corrcoef(x[:-lag], x[lag:])[0, 1]) < 1e-12

    def test_max_lag_too_big(self):
        with pytest.raises(DataError):
            autocorrelation_by_lag(np.zeros(10), 9)

    def test_csv(self, tmp_path, rng):
        c = autocorrelation_by_lag(rng.normal(size=(50, 2)), 3)
        write_autocorr_csv(c, ["a", "b"], tmp_path / "ac.csv")
        rows = list(csv.reader(open(tmp_path / "ac.csv")))
        assert rows[0] == ["channel", "lag", "correlation"] and len(rows) == 9


@pytest.mark.parametrize("name", sorted(SYNTHETIC))
def test_synthetic_seeded(name):
    a, b = SYNTHETIC[name](500, 3, seed=4), SYNTHETIC[name](500, 3, seed=4)
    assert isinstance(a, RawDataset) and a.shape == (500, 3)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.values.tobytes() != SYNTHETIC[name](500, 3, seed=5).values.tobytes()
