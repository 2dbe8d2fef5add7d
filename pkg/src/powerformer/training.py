"""Training loop, early stopping, learnable decay constant and result tables."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .data import Splits, WindowedDataset
from .model import ModelConfig, Powerformer
from .optim import AdamState, adam_step
from .tensor import backward, mse, no_grad

log = logging.getLogger(__name__)

PAPER_SEEDS = (2021, 1776, 1953)
PRED_LENS = (96, 192, 336, 720)
SEQ_LENS = (336, 512)
ALPHA_FLOOR = 1e-3


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    patience: int | None = None
    lr: float = 1e-4
    batch_size: int = 128
    max_batches: int | None = None  # per-epoch cap for smoke runs
    eval_batch_size: int = 256
    alpha_lr: float | None = None  # defaults to lr
    alpha_lr_decay: float = 0.9  # multiplicative, per epoch
    alpha_drift_cap: float | None = None  # defaults to 0.5 * initial alpha

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1 when set")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    dataset: str = ""
    seq_len: int = 0
    pred_len: int = 0
    mask: str = ""
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf
    stopped_epoch: int = 0
    test_mse: float = math.nan
    test_mae: float = math.nan
    alpha_trajectory: list[float] = field(default_factory=list)
    param_hash: str = ""
    checkpoint: str | None = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> RunRecord:
        return cls(**json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> RunRecord:
        return cls.from_json(Path(path).read_text())


@dataclass
class Windows:
    train: WindowedDataset
    val: WindowedDataset
    test: WindowedDataset
    name: str = ""

    @classmethod
    def from_splits(cls, splits: Splits, seq_len: int, pred_len: int, name: str = "") -> Windows:
        return cls(
            WindowedDataset(splits.train, seq_len, pred_len),
            WindowedDataset(splits.val, seq_len, pred_len),
            WindowedDataset(splits.test, seq_len, pred_len),
            name,
        )


def metrics(pred: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    """(MSE, MAE) over every element."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), float(np.mean(np.abs(diff)))


def evaluate(model: Powerformer, ds: WindowedDataset, batch_size: int = 256) -> tuple[float, float]:
    """Mean MSE and MAE over all windows, channels and horizon steps."""
    sq = ab = 0.0
    n = 0
    with no_grad():
        for x, y in ds.iter_batches(batch_size):
            pred, _ = model.forward(x, training=False)
            d = pred.data - y
            sq += float(np.sum(d * d))
            ab += float(np.sum(np.abs(d)))
            n += d.size
    return sq / n, ab / n


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _alpha_bounds(alpha0: float, cap: float) -> tuple[float, float]:
    return alpha0 - cap, alpha0 + cap


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, data: Windows,
          model: Powerformer | None = None) -> tuple[RunRecord, Powerformer]:
    """Mini-batch Adam with optional early stopping on validation MSE.

    The returned model holds the best-validation parameters, and the test
    metrics in the record are computed with them.
    """
    model = model or Powerformer(model_cfg)
    seed = model_cfg.seed
    params = model.parameters()
    state = AdamState.for_params(params)
    rec = RunRecord(
        config_hash=model_cfg.digest(), seed=seed, dataset=data.name,
        seq_len=model_cfg.seq_len, pred_len=model_cfg.pred_len, mask=model_cfg.mask.label(),
    )

    learn_alpha = model.alpha is not None
    if learn_alpha:
        alpha0 = float(model.alpha.data)
        cap = train_cfg.alpha_drift_cap
        cap = 0.5 * alpha0 if cap is None else cap
        lo, hi = _alpha_bounds(alpha0, cap)
        alpha_state = AdamState.for_params([model.alpha])
        rec.alpha_trajectory.append(alpha0)

    best_state = model.state_arrays()
    bad_epochs = 0
    for epoch in range(train_cfg.epochs):
        order = epoch_order(seed, epoch, len(data.train))
        losses = []
        alpha_lr = (train_cfg.alpha_lr if train_cfg.alpha_lr is not None else train_cfg.lr)
        alpha_lr *= train_cfg.alpha_lr_decay**epoch
        for b, (x, y) in enumerate(data.train.iter_batches(train_cfg.batch_size, order)):
            if train_cfg.max_batches is not None and b >= train_cfg.max_batches:
                break
            model.zero_grad()
            pred, _ = model.forward(x, training=True)
            loss = mse(pred, y)
            lv = loss.item()
            if not math.isfinite(lv):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}, batch {b}")
            backward(loss)
            adam_step(params, [p.grad for p in params], state, train_cfg.lr)
            if learn_alpha:
                adam_step([model.alpha], [model.alpha.grad], alpha_state, alpha_lr)
                model.alpha.data = np.array(_clamp_alpha(float(model.alpha.data), lo, hi))
            losses.append(lv)
        rec.train_losses.append(float(np.mean(losses)))
        if learn_alpha:
            rec.alpha_trajectory.append(float(model.alpha.data))

        val_mse, _ = evaluate(model, data.val, train_cfg.eval_batch_size)
        rec.val_losses.append(val_mse)
        rec.stopped_epoch = epoch + 1
        log.info("epoch %d train %.5f val %.5f", epoch + 1, rec.train_losses[-1], val_mse)
        if val_mse < rec.best_val:
            rec.best_val = val_mse
            rec.best_epoch = epoch
            best_state = model.state_arrays()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if train_cfg.patience is not None and bad_epochs >= train_cfg.patience:
                log.info("early stop after epoch %d", epoch + 1)
                break

    model.load_state_arrays(best_state)
    rec.param_hash = model.param_hash()
    rec.test_mse, rec.test_mae = evaluate(model, data.test, train_cfg.eval_batch_size)
    return rec, model


def _clamp_alpha(alpha: float, lo: float, hi: float) -> float:
    a = min(max(alpha, lo), hi)
    if a < ALPHA_FLOOR:
        warnings.warn(f"alpha driven to {a:.4g}; clamped at {ALPHA_FLOOR}", RuntimeWarning, stacklevel=3)
        a = ALPHA_FLOOR
    return a


def train_learnable_alpha(model_cfg: ModelConfig, train_cfg: TrainConfig,
                          data: Windows) -> tuple[RunRecord, Powerformer]:
    """Train with the power-law decay constant as a parameter.

    The trajectory of alpha (initial value, then one entry per epoch) is
    stored in ``RunRecord.alpha_trajectory``.
    """
    if not model_cfg.mask.is_power_law:
        raise ValueError("learnable alpha needs a power-law mask family")
    spec = dataclasses.replace(model_cfg.mask, learnable=True)
    return train(model_cfg.replace(mask=spec), train_cfg, data)


# ---------------------------------------------------------------------------
# Result tables
# ---------------------------------------------------------------------------


@dataclass
class ResultRow:
    dataset: str
    pred_len: int
    seq_len: int
    mask: str
    mse: float
    mae: float
    mse_std: float
    mae_std: float
    n_seeds: int

    @property
    def flag(self) -> str:
        return "single_seed" if self.n_seeds == 1 else ""


@dataclass
class ProtocolResult:
    table: list[ResultRow]  # selected rows, one per (dataset, pred_len)
    aggregated: list[ResultRow]  # every (dataset, seq_len, pred_len, mask) cell
    selected_seq_len: dict[str, int]
    missing: list[tuple]


def aggregate(records: Iterable[RunRecord]) -> list[ResultRow]:
    groups: dict[tuple, list[RunRecord]] = defaultdict(list)
    for r in records:
        groups[(r.dataset, r.seq_len, r.pred_len, r.mask)].append(r)
    rows = []
    for (ds, sl, pl, mk), rs in sorted(groups.items()):
        m = np.array([r.test_mse for r in rs])
        a = np.array([r.test_mae for r in rs])
        rows.append(ResultRow(ds, pl, sl, mk, float(m.mean()), float(a.mean()),
                              float(m.std()), float(a.std()), len(rs)))
    return rows


def select_masks(rows: Sequence[ResultRow]) -> dict[tuple[str, int, int], ResultRow]:
    """Best mask (by mean MSE) for each (dataset, seq_len, pred_len)."""
    best: dict[tuple[str, int, int], ResultRow] = {}
    for row in rows:
        key = (row.dataset, row.seq_len, row.pred_len)
        if key not in best or row.mse < best[key].mse:
            best[key] = row
    return best


def select_seq_len(best: dict[tuple[str, int, int], ResultRow]) -> dict[str, int]:
    """One look-back per dataset: lowest mean over horizons of the per-horizon best MSE.

    Only look-backs that cover every horizon seen for the dataset compete.
    """
    by_ds: dict[str, dict[int, dict[int, float]]] = defaultdict(lambda: defaultdict(dict))
    for (ds, sl, pl), row in best.items():
        by_ds[ds][sl][pl] = row.mse
    chosen = {}
    for ds, per_sl in by_ds.items():
        horizons = set().union(*(set(v) for v in per_sl.values()))
        complete = {sl: v for sl, v in per_sl.items() if set(v) == horizons} or per_sl
        chosen[ds] = min(sorted(complete), key=lambda sl: np.mean(list(complete[sl].values())))
    return chosen


def evaluate_protocol(records: Sequence[RunRecord], expected: Iterable[tuple] | None = None) -> ProtocolResult:
    """Aggregate seeds, pick a mask per horizon and a look-back per dataset.

    ``expected`` optionally lists (dataset, seq_len, pred_len, mask, seed)
    runs; absent ones are reported in ``missing``.
    """
    records = list(records)
    missing = []
    if expected is not None:
        have = {(r.dataset, r.seq_len, r.pred_len, r.mask, r.seed) for r in records}
        missing = [e for e in expected if tuple(e) not in have]
    rows = aggregate(records)
    best = select_masks(rows)
    chosen = select_seq_len(best)
    table = sorted(
        (row for (ds, sl, pl), row in best.items() if chosen.get(ds) == sl),
        key=lambda r: (r.dataset, r.pred_len),
    )
    return ProtocolResult(table, rows, chosen, missing)


TABLE_COLUMNS = ["dataset", "pred_len", "seq_len", "mask", "mse", "mae", "mse_std", "mae_std", "n_seeds", "flag"]


def write_results_csv(rows: Sequence[ResultRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_COLUMNS)
        for r in rows:
            w.writerow([r.dataset, r.pred_len, r.seq_len, r.mask, f"{r.mse:.6f}", f"{r.mae:.6f}",
                        f"{r.mse_std:.6f}", f"{r.mae_std:.6f}", r.n_seeds, r.flag])
