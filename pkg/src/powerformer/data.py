"""Benchmark CSV ingestion, chronological splits and supervised windows."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

STD_EPS = 1e-5

HOURS_PER_MONTH = 30 * 24


class DataError(ValueError):
    """Raised for unreadable or malformed datasets."""


@dataclass
class RawDataset:
    name: str
    columns: list[str]
    values: np.ndarray  # (T, D)
    timestamps: list[str] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def load_csv(path: str | Path, name: str | None = None) -> RawDataset:
    """Read a header-first CSV; a leading ``date`` column is kept as timestamps.

    Any blank or non-numeric cell rejects the file. The error names the
    first bad cell and how many rows are affected.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r]
    if not body:
        raise DataError(f"{path} has a header but no data rows")

    has_time = header[0].lower() in ("date", "time", "timestamp", "datetime")
    first = 1 if has_time else 0
    columns = header[first:]
    if not columns:
        raise DataError(f"{path} has no numeric columns")

    values = np.empty((len(body), len(columns)))
    bad_rows: list[int] = []
    first_bad: tuple[int, str, str] | None = None
    for r, row in enumerate(body):
        if len(row) != len(header):
            bad_rows.append(r)
            first_bad = first_bad or (r, "<row>", f"expected {len(header)} cells, got {len(row)}")
            continue
        for c, cell in enumerate(row[first:]):
            try:
                if cell.strip() == "":
                    raise ValueError("blank")
                values[r, c] = float(cell)
            except ValueError:
                if not bad_rows or bad_rows[-1] != r:
                    bad_rows.append(r)
                first_bad = first_bad or (r, columns[c], repr(cell))
    if bad_rows:
        r, col, what = first_bad
        # data row r is file line r + 2 (header is line 1)
        raise DataError(
            f"{path}: {len(bad_rows)} row(s) with missing or unparseable cells; "
            f"first at line {r + 2}, column {col!r}: {what}"
        )
    timestamps = [row[0] for row in body] if has_time else None
    return RawDataset(name or path.stem, columns, values, timestamps)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    """Row ranges ``[start, end)`` per split.

    Validation and test ranges start ``seq_len`` rows before their first
    target so the first window has a full look-back.
    """

    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]

    def __post_init__(self):
        for name in ("train", "val", "test"):
            lo, hi = getattr(self, name)
            if not 0 <= lo < hi:
                raise DataError(f"bad {name} range {lo}:{hi}")
        if not (self.train[1] <= self.val[1] <= self.test[1]):
            raise DataError("split ends must be ordered train <= val <= test")


def split_scheme(name: str) -> str:
    key = name.lower()
    if key.startswith("etth"):
        return "etth"
    if key.startswith("ettm"):
        return "ettm"
    return "ratio"


def default_splits(n_rows: int, seq_len: int, scheme: str = "ratio") -> SplitSpec:
    """Conventional borders: ETTh 12/4/4 months, ETTm the same at 15 min, else 70/10/20."""
    if scheme in ("etth", "ettm"):
        per_month = HOURS_PER_MONTH * (4 if scheme == "ettm" else 1)
        tr, va, te = 12 * per_month, 16 * per_month, 20 * per_month
        if n_rows < te:
            raise DataError(f"{scheme} split needs {te} rows, dataset has {n_rows}")
    elif scheme == "ratio":
        tr = int(n_rows * 0.7)
        te_len = int(n_rows * 0.2)
        va = n_rows - te_len
        te = n_rows
    else:
        raise DataError(f"unknown split scheme {scheme!r}")
    if tr - seq_len < 0:
        raise DataError(f"look-back {seq_len} longer than the training split ({tr} rows)")
    return SplitSpec((0, tr), (tr - seq_len, va), (va - seq_len, te))


@dataclass
class Splits:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    spec: SplitSpec


def split_and_standardize(ds: RawDataset | np.ndarray, spec: SplitSpec) -> Splits:
    """Standardise every split with per-channel statistics from the training rows."""
    values = ds.values if isinstance(ds, RawDataset) else np.asarray(ds, dtype=np.float64)
    if spec.test[1] > len(values):
        raise DataError(f"split ends at row {spec.test[1]} but dataset has {len(values)} rows")
    train_raw = values[spec.train[0] : spec.train[1]]
    if len(train_raw) < 2:
        raise DataError("training split needs at least 2 rows")
    mean = train_raw.mean(axis=0)
    std = np.maximum(train_raw.std(axis=0), STD_EPS)

    def norm(lo_hi):
        lo, hi = lo_hi
        return (values[lo:hi] - mean) / std

    return Splits(norm(spec.train), norm(spec.val), norm(spec.test), mean, std, spec)


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------


class WindowedDataset:
    """Sliding (look-back, horizon) windows over one split.

    Window ``k`` reads rows ``[k, k + seq_len)`` as input and
    ``[k + seq_len, k + seq_len + pred_len)`` as target, for every channel.
    """

    def __init__(self, data: np.ndarray, seq_len: int, pred_len: int):
        self.data = np.asarray(data, dtype=np.float64)
        self.seq_len = seq_len
        self.pred_len = pred_len
        n = len(self.data) - seq_len - pred_len + 1
        if n < 1:
            raise DataError(
                f"split of {len(self.data)} rows too short for seq_len={seq_len}, pred_len={pred_len}"
            )
        self.n_windows = n
        # (T, D) -> (D, T) once so batches slice contiguous rows
        self._series = np.ascontiguousarray(self.data.T)

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return self.n_windows

    def examples(self) -> Iterator[tuple[int, int]]:
        """Every (window start, channel) pair."""
        for k in range(self.n_windows):
            for c in range(self.n_channels):
                yield k, c

    def __getitem__(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        if not 0 <= k < self.n_windows:
            raise IndexError(k)
        s = self._series
        return s[:, k : k + self.seq_len], s[:, k + self.seq_len : k + self.seq_len + self.pred_len]

    def batch(self, starts) -> tuple[np.ndarray, np.ndarray]:
        """Inputs (B, D, seq_len) and targets (B, D, pred_len)."""
        starts = np.asarray(starts, dtype=np.int64)
        x_idx = starts[:, None] + np.arange(self.seq_len)[None, :]
        y_idx = starts[:, None] + self.seq_len + np.arange(self.pred_len)[None, :]
        s = self._series
        return s[:, x_idx].transpose(1, 0, 2), s[:, y_idx].transpose(1, 0, 2)

    def iter_batches(self, batch_size: int, order=None):
        order = np.arange(self.n_windows) if order is None else np.asarray(order)
        for i in range(0, len(order), batch_size):
            yield self.batch(order[i : i + batch_size])


# ---------------------------------------------------------------------------
# Autocorrelation
# ---------------------------------------------------------------------------


def autocorrelation_by_lag(values: RawDataset | np.ndarray, max_lag: int) -> np.ndarray:
    """Pearson correlation of ``x[t]`` with ``x[t + lag]`` for lags 0..max_lag.

    Returns (D, max_lag + 1); constant overlaps give NaN.
    """
    x = values.values if isinstance(values, RawDataset) else np.asarray(values, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    T = len(x)
    if max_lag >= T - 1 or max_lag < 0:
        raise DataError(f"max_lag {max_lag} must be in [0, {T - 2}] for {T} steps")
    out = np.empty((x.shape[1], max_lag + 1))
    for lag in range(max_lag + 1):
        a = x[: T - lag]
        b = x[lag:]
        da = a - a.mean(axis=0)
        db = b - b.mean(axis=0)
        num = (da * db).sum(axis=0)
        den = np.sqrt((da * da).sum(axis=0) * (db * db).sum(axis=0))
        with np.errstate(invalid="ignore", divide="ignore"):
            out[:, lag] = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    return out


def write_autocorr_csv(corr: np.ndarray, channels: list[str], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["channel", "lag", "correlation"])
        for c, name in enumerate(channels):
            for lag, v in enumerate(corr[c]):
                w.writerow([name, lag, "nan" if math.isnan(v) else repr(float(v))])


# ---------------------------------------------------------------------------
# Synthetic series
# ---------------------------------------------------------------------------


def sine_mixture(n_steps: int = 4000, n_channels: int = 3, seed: int = 0,
                 noise: float = 0.05, periods=(24.0, 60.0, 168.0)) -> RawDataset:
    """Each channel sums sines at ``periods`` with seeded amplitudes and phases."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_steps, dtype=np.float64)
    cols = []
    for _ in range(n_channels):
        amps = rng.uniform(0.5, 1.5, len(periods))
        phases = rng.uniform(0, 2 * np.pi, len(periods))
        sig = sum(a * np.sin(2 * np.pi * t / p + ph) for a, p, ph in zip(amps, periods, phases))
        cols.append(sig + noise * rng.standard_normal(n_steps))
    return RawDataset("sine_mixture", [f"ch{i}" for i in range(n_channels)], np.stack(cols, axis=1))


def ar1(n_steps: int = 4000, n_channels: int = 3, seed: int = 0, phi: float = 0.9) -> RawDataset:
    rng = np.random.default_rng(seed)
    x = np.zeros((n_steps, n_channels))
    eps = rng.standard_normal((n_steps, n_channels))
    for t in range(1, n_steps):
        x[t] = phi * x[t - 1] + eps[t]
    return RawDataset("ar1", [f"ch{i}" for i in range(n_channels)], x)


def sine_trend(n_steps: int = 4000, n_channels: int = 3, seed: int = 0,
               period: float = 24.0, slope: float = 1e-3, noise: float = 0.05) -> RawDataset:
    rng = np.random.default_rng(seed)
    t = np.arange(n_steps, dtype=np.float64)
    cols = []
    for _ in range(n_channels):
        ph = rng.uniform(0, 2 * np.pi)
        cols.append(np.sin(2 * np.pi * t / period + ph) + slope * t + noise * rng.standard_normal(n_steps))
    return RawDataset("sine_trend", [f"ch{i}" for i in range(n_channels)], np.stack(cols, axis=1))


SYNTHETIC = {"sine_mixture": sine_mixture, "ar1": ar1, "sine_trend": sine_trend}


def write_csv(ds: RawDataset, path: str | Path) -> None:
    """Write in benchmark layout (leading ``date`` column)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", *ds.columns])
        for t, row in enumerate(ds.values):
            stamp = ds.timestamps[t] if ds.timestamps else str(t)
            w.writerow([stamp, *(repr(float(v)) for v in row)])
