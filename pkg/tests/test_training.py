import csv
import math
import warnings

import numpy as np
import pytest

import powerformer.training as training
from powerformer.data import default_splits, sine_mixture, split_and_standardize
from powerformer.masks import MaskSpec
from powerformer.model import ModelConfig, Powerformer
from powerformer.training import (
    ALPHA_FLOOR,
    PAPER_SEEDS,
    DivergenceError,
    RunRecord,
    TrainConfig,
    Windows,
    aggregate,
    epoch_order,
    evaluate_protocol,
    metrics,
    select_masks,
    train,
    train_learnable_alpha,
    write_results_csv,
)


@pytest.fixture(scope="module")
def windows():
    ds = sine_mixture(600, 2, seed=1)
    sp = split_and_standardize(ds, default_splits(600, 32))
    return Windows.from_splits(sp, 32, 8, "sine")


def small_cfg(**kw):
    base = dict(seq_len=32, pred_len=8, patch_len=8, stride=4, n_layers=1, d_model=8, n_heads=2,
                d_ff=16, dropout=0.0, head_dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


FAST = dict(batch_size=16, max_batches=3, eval_batch_size=64)


class TestMetrics:
    def test_exact(self):
        assert metrics(np.ones(5), np.ones(5)) == (0.0, 0.0)

    def test_offset(self):
        assert metrics(np.zeros((2, 3)) + 1, np.zeros((2, 3))) == (1.0, 1.0)

    def test_vs_two_pass(self, rng):
        a, b = rng.normal(size=(4, 7)), rng.normal(size=(4, 7))
        se = [(x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())]
        ae = [abs(x - y) for x, y in zip(a.ravel(), b.ravel())]
        mse_, mae_ = metrics(a, b)
        assert abs(mse_ - math.fsum(se) / len(se)) < 1e-12
        assert abs(mae_ - math.fsum(ae) / len(ae)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            metrics(np.zeros(3), np.zeros(4))


class TestTrain:
    def test_seeds(self):
        assert PAPER_SEEDS == (2021, 1776, 1953)

    def test_epoch_order_reproducible(self):
        assert np.array_equal(epoch_order(7, 3, 50), epoch_order(7, 3, 50))
        assert not np.array_equal(epoch_order(7, 3, 50), epoch_order(7, 4, 50))

    def test_zero_lr_leaves_params(self, windows):
        cfg = small_cfg()
        before = Powerformer(cfg).param_hash()
        rec, model = train(cfg, TrainConfig(epochs=1, lr=0.0, **FAST), windows)
        assert model.param_hash() == before == rec.param_hash

    def test_reproducible_records(self, windows):
        cfg = small_cfg(dropout=0.2, head_dropout=0.2)
        tc = TrainConfig(epochs=2, lr=1e-3, **FAST)
        a, _ = train(cfg, tc, windows)
        b, _ = train(cfg, tc, windows)
        assert a.to_json() == b.to_json()

    def test_loss_decreases(self, windows):
        rec, _ = train(small_cfg(), TrainConfig(epochs=4, lr=3e-3, batch_size=16, max_batches=10), windows)
        assert rec.train_losses[-1] < rec.train_losses[0]
        assert rec.best_val == min(rec.val_losses)
        assert math.isfinite(rec.test_mse) and math.isfinite(rec.test_mae)

    def test_patience_one_stops_after_two(self, windows, monkeypatch):
        vals = iter([1.0, 2.0, 3.0, 4.0, 5.0])
        real = training.evaluate

        def fake(model, ds, bs=256):
            return (next(vals), 0.0) if ds is windows.val else real(model, ds, bs)

        monkeypatch.setattr(training, "evaluate", fake)
        rec, _ = train(small_cfg(), TrainConfig(epochs=5, patience=1, lr=1e-3, **FAST), windows)
        assert rec.stopped_epoch == 2 and rec.best_epoch == 0

    def test_restores_best_checkpoint(self, windows, monkeypatch):
        vals = iter([3.0, 1.0, 2.0, 2.5])
        real = training.evaluate
        hashes = []

        def fake(model, ds, bs=256):
            if ds is windows.val:
                hashes.append(model.param_hash())
                return next(vals), 0.0
            return real(model, ds, bs)

        monkeypatch.setattr(training, "evaluate", fake)
        rec, model = train(small_cfg(), TrainConfig(epochs=4, lr=1e-3, **FAST), windows)
        assert rec.best_epoch == 1
        assert model.param_hash() == hashes[1] == rec.param_hash

    def test_divergence(self, windows):
        model = Powerformer(small_cfg())
        model.params["head.b"].data[:] = np.inf
        with pytest.raises(DivergenceError):
            train(small_cfg(), TrainConfig(epochs=1, **FAST), windows, model=model)

    def test_record_json_round_trip(self, windows, tmp_path):
        rec, _ = train(small_cfg(), TrainConfig(epochs=1, **FAST), windows)
        rec.save(tmp_path / "r.json")
        assert RunRecord.load(tmp_path / "r.json") == rec


class TestLearnableAlpha:
    def test_cap_zero_is_bit_equivalent(self, windows):
        tc = TrainConfig(epochs=2, lr=1e-3, alpha_drift_cap=0.0, alpha_lr=0.1, **FAST)
        const, _ = train(small_cfg(mask=MaskSpec("pl", alpha=1.0)), tc, windows)
        learn, _ = train_learnable_alpha(small_cfg(mask=MaskSpec("pl", alpha=1.0)), tc, windows)
        assert learn.alpha_trajectory == [1.0, 1.0, 1.0]
        assert learn.train_losses == const.train_losses
        assert learn.val_losses == const.val_losses
        assert learn.test_mse == const.test_mse

    def test_drift_is_capped(self, windows):
        tc = TrainConfig(epochs=3, lr=1e-3, alpha_lr=0.5, alpha_drift_cap=0.1, **FAST)
        rec, _ = train_learnable_alpha(small_cfg(mask=MaskSpec("spl", alpha=0.5)), tc, windows)
        assert len(rec.alpha_trajectory) == 4
        assert all(abs(a - 0.5) <= 0.1 + 1e-15 for a in rec.alpha_trajectory)

    def test_floor_with_warning(self):
        with warnings.catch_warnings(record=True) as w:
            warnings.simplefilter("always")
            assert training._clamp_alpha(-0.4, -1.0, 2.0) == ALPHA_FLOOR
        assert any(issubclass(x.category, RuntimeWarning) for x in w)

    def test_requires_power_law(self, windows):
        with pytest.raises(ValueError):
            train_learnable_alpha(small_cfg(mask=MaskSpec("bw")), TrainConfig(epochs=1), windows)


def rec(ds, sl, pl, mask, seed, mse_, mae_=None):
    return RunRecord(config_hash="x", seed=seed, dataset=ds, seq_len=sl, pred_len=pl, mask=mask,
                     test_mse=mse_, test_mae=mse_ if mae_ is None else mae_)


class TestProtocol:
    def test_single_run_flagged(self):
        rows = aggregate([rec("d", 336, 96, "causal", 1, 0.4)])
        assert len(rows) == 1 and rows[0].n_seeds == 1 and rows[0].flag == "single_seed"

    def test_identical_seeds(self):
        rows = aggregate([rec("d", 336, 96, "causal", s, 0.25) for s in PAPER_SEEDS])
        assert rows[0].mse == 0.25 and rows[0].mse_std == 0.0 and rows[0].flag == ""

    def test_mask_argmin(self):
        rows = aggregate([rec("d", 336, 96, "pl_a0.5", 1, 0.30), rec("d", 336, 96, "pl_a1", 1, 0.28)])
        assert select_masks(rows)[("d", 336, 96)].mask == "pl_a1"

    def test_seq_len_selection_and_missing(self):
        records = [
            rec("d", 336, 96, "causal", 1, 0.40), rec("d", 336, 192, "causal", 1, 0.50),
            rec("d", 512, 96, "causal", 1, 0.42), rec("d", 512, 192, "causal", 1, 0.44),
        ]
        expected = [("d", sl, pl, "causal", 1) for sl in (336, 512) for pl in (96, 192, 336)]
        res = evaluate_protocol(records, expected)
        assert res.selected_seq_len == {"d": 512}
        assert [r.pred_len for r in res.table] == [96, 192]
        assert sorted(res.missing) == [("d", 336, 336, "causal", 1), ("d", 512, 336, "causal", 1)]

    def test_csv(self, tmp_path):
        res = evaluate_protocol([rec("d", 336, 96, "causal", 1, 0.4)])
        write_results_csv(res.table, tmp_path / "t.csv")
        rows = list(csv.reader(open(tmp_path / "t.csv")))
        assert rows[0] == training.TABLE_COLUMNS
        assert rows[1][:4] == ["d", "96", "336", "causal"] and rows[1][-1] == "single_seed"
