"""Causal and decay masks for weighted causal attention.

Masks are additive P x P score matrices. Lags are measured in patch tokens,
``dt = i - j`` for query row ``i`` and key column ``j``.
"""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable

import numpy as np

from .tensor import ContractError, ShapeError

FAMILIES = ("none", "weight_power_law", "similarity_power_law", "butterworth")

# short names accepted by configs and the CLI
FAMILY_ALIASES = {
    "none": "none",
    "causal": "none",
    "pl": "weight_power_law",
    "weight_power_law": "weight_power_law",
    "spl": "similarity_power_law",
    "similarity_power_law": "similarity_power_law",
    "bw": "butterworth",
    "butterworth": "butterworth",
    "bw1": "butterworth",
    "bw2": "butterworth",
}

BUTTER_CUTOFF = 0.8  # Nyquist-normalised digital cutoff
BUTTER_POINTS = 512
BUTTER_SCALE = 5.0  # multiplies the log-gain to match score magnitudes


@dataclass(frozen=True)
class MaskSpec:
    family: str = "none"
    alpha: float = 1.0
    order: int = 2
    critical_time: float = 10.0
    learnable: bool = False

    def __post_init__(self):
        fam = FAMILY_ALIASES.get(self.family)
        if fam is None:
            raise ContractError(f"unknown mask family {self.family!r}; expected one of {FAMILIES}")
        object.__setattr__(self, "family", fam)
        if fam in ("weight_power_law", "similarity_power_law") and not self.alpha > 0:
            raise ContractError(f"alpha must be > 0 for {fam}, got {self.alpha}")
        if fam == "butterworth":
            if self.order not in (1, 2):
                raise ContractError(f"butterworth order must be 1 or 2, got {self.order}")
            if not self.critical_time > 0:
                raise ContractError(f"critical_time must be > 0, got {self.critical_time}")
            if self.learnable:
                raise ContractError("butterworth masks are not learnable")
        if self.learnable and fam == "none":
            raise ContractError("learnable alpha requires a power-law family")

    @property
    def is_power_law(self) -> bool:
        return self.family in ("weight_power_law", "similarity_power_law")

    def label(self) -> str:
        if self.family == "none":
            return "causal"
        if self.family == "weight_power_law":
            return f"pl_a{self.alpha:g}"
        if self.family == "similarity_power_law":
            return f"spl_a{self.alpha:g}"
        return f"bw{self.order}_tc{self.critical_time:g}"

    def with_alpha(self, alpha: float) -> MaskSpec:
        return MaskSpec(self.family, alpha, self.order, self.critical_time, self.learnable)


@dataclass(frozen=True, eq=False)
class ScoreMask:
    """P x P additive score matrix; -inf marks forbidden couplings."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ShapeError(f"score mask must be square, got {v.shape}")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other) -> bool:
        return isinstance(other, ScoreMask) and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash(self.values.tobytes())


# ---------------------------------------------------------------------------
# Reweighting functions
# ---------------------------------------------------------------------------


def _check_lags(dt) -> np.ndarray:
    arr = np.asarray(dt, dtype=np.float64)
    if np.any(arr < 0):
        raise ContractError("lags must be non-negative")
    return arr


def f_weight_power_law(dt, alpha: float):
    """``-alpha * ln(dt)`` for dt >= 2, and 0 at dt in {0, 1}."""
    if not alpha > 0:
        raise ContractError(f"alpha must be > 0, got {alpha}")
    arr = _check_lags(dt)
    out = -alpha * np.log(np.maximum(arr, 1.0)) + 0.0  # no -0.0
    return float(out) if out.ndim == 0 else out


def f_similarity_power_law(dt, alpha: float):
    """``-(dt ** alpha)``."""
    if not alpha > 0:
        raise ContractError(f"alpha must be > 0, got {alpha}")
    arr = _check_lags(dt)
    out = -np.power(arr, alpha) + 0.0
    return float(out) if out.ndim == 0 else out


def d_weight_power_law_dalpha(dt) -> np.ndarray:
    return -np.log(np.maximum(_check_lags(dt), 1.0))


def d_similarity_power_law_dalpha(dt, alpha: float) -> np.ndarray:
    arr = _check_lags(dt)
    logs = np.log(np.where(arr > 0, arr, 1.0))
    return -np.power(arr, alpha) * logs


# ---------------------------------------------------------------------------
# Digital Butterworth design
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def butterworth_zpk(order: int, cutoff: float = BUTTER_CUTOFF):
    """Zeros, poles and gain of a digital lowpass Butterworth filter.

    Analog prototype poles ``exp(i*pi*(2k+n-1)/(2n))`` for k = 1..n, frequency
    prewarping at sample rate 2, then the bilinear transform.
    """
    if order not in (1, 2):
        raise ContractError(f"order must be 1 or 2, got {order}")
    n = order
    k_idx = np.arange(1, n + 1)
    proto = np.exp(1j * np.pi * (2 * k_idx + n - 1) / (2 * n))
    fs = 2.0
    warped = 2.0 * fs * math.tan(math.pi * cutoff / fs)
    poles_a = warped * proto
    gain_a = warped**n
    fs2 = 2.0 * fs
    poles = (fs2 + poles_a) / (fs2 - poles_a)
    zeros = -np.ones(n)
    gain = gain_a * float(np.real(1.0 / np.prod(fs2 - poles_a)))
    return zeros, poles, gain


def butterworth_response(order: int, w) -> np.ndarray:
    """Magnitude ``|H(e^{iw})|`` of the order-``order`` digital lowpass."""
    zeros, poles, gain = butterworth_zpk(order)
    z = np.exp(1j * np.asarray(w, dtype=np.float64))
    num = np.ones_like(z)
    den = np.ones_like(z)
    for zr in zeros:
        num = num * (z - zr)
    for pl in poles:
        den = den * (z - pl)
    return np.abs(gain * num / den)


def butterworth_curve(order: int, critical_time: float) -> tuple[np.ndarray, np.ndarray]:
    """The (time, score) grid the gain is interpolated from.

    512 frequencies evenly spaced on [0, pi) map to times ``t_c * w / 2``.
    """
    if order not in (1, 2):
        raise ContractError(f"order must be 1 or 2, got {order}")
    if not critical_time > 0:
        raise ContractError(f"critical_time must be > 0, got {critical_time}")
    w = np.pi * np.arange(BUTTER_POINTS) / BUTTER_POINTS
    mag = butterworth_response(order, w)
    # |H| <= 1 analytically; clip rounding so the score is never positive
    score = np.minimum(BUTTER_SCALE * np.log(mag), 0.0)
    return critical_time * w / 2.0, score


def butterworth_gain(order: int, critical_time: float, dts) -> np.ndarray:
    """Butterworth score contribution at the requested lags.

    Linear interpolation on the rendered grid, flat beyond its last point.
    """
    t, score = butterworth_curve(order, critical_time)
    lags = _check_lags(dts)
    return np.interp(lags, t, score)


# ---------------------------------------------------------------------------
# Rendering and composition
# ---------------------------------------------------------------------------


def causal_mask(P: int) -> ScoreMask:
    if P < 1:
        raise ContractError("causal mask needs at least one position")
    return ScoreMask(np.triu(np.full((P, P), -np.inf), k=1))


def lag_matrix(P: int) -> np.ndarray:
    idx = np.arange(P)
    return idx[:, None] - idx[None, :]


def decay_values(spec: MaskSpec, lags: np.ndarray) -> np.ndarray:
    """Family function evaluated at non-negative ``lags``."""
    if spec.family == "none":
        return np.zeros_like(lags, dtype=np.float64)
    if spec.family == "weight_power_law":
        return f_weight_power_law(lags, spec.alpha)
    if spec.family == "similarity_power_law":
        return f_similarity_power_law(lags, spec.alpha)
    return butterworth_gain(spec.order, spec.critical_time, lags)


def decay_alpha_derivative(spec: MaskSpec, lags: np.ndarray) -> np.ndarray:
    """d(decay)/d(alpha) at ``lags`` for power-law families."""
    if spec.family == "weight_power_law":
        return d_weight_power_law_dalpha(lags)
    if spec.family == "similarity_power_law":
        return d_similarity_power_law_dalpha(lags, spec.alpha)
    raise ContractError(f"family {spec.family!r} has no alpha derivative")


@functools.lru_cache(maxsize=256)
def render_decay_mask(spec: MaskSpec, P: int) -> ScoreMask:
    """f(i - j) on and below the diagonal, 0 above it."""
    if P < 1:
        raise ContractError("decay mask needs at least one position")
    lags = lag_matrix(P)
    lower = lags >= 0
    vals = np.zeros((P, P))
    vals[lower] = decay_values(spec, lags[lower].astype(np.float64))
    return ScoreMask(vals)


def compose(causal: ScoreMask, decay: ScoreMask) -> ScoreMask:
    if causal.size != decay.size:
        raise ShapeError(f"mask sizes differ: {causal.size} vs {decay.size}")
    return ScoreMask(causal.values + decay.values)


def full_mask(spec: MaskSpec, P: int) -> ScoreMask:
    """Causal mask composed with the spec's decay mask."""
    return compose(causal_mask(P), render_decay_mask(spec, P))


def check_score_mask(mask: ScoreMask) -> None:
    """Assert the composed-mask invariants; raises ``AssertionError`` on failure."""
    v = mask.values
    P = mask.size
    upper = np.triu(np.ones((P, P), dtype=bool), k=1)
    assert np.all(np.isneginf(v[upper])), "entries above the diagonal must be -inf"
    lower = v[~upper]
    assert np.all(np.isfinite(lower)) and np.all(lower <= 0), "lower triangle must be finite and <= 0"
    assert np.all(np.diag(v) == 0), "diagonal must be 0"
    for i in range(P):
        row = v[i, : i + 1][::-1]  # ordered by increasing lag
        assert np.all(np.diff(row) <= 0), f"row {i} not non-increasing in lag"


def write_mask_csv(mask: ScoreMask, dest: str | Path | IO[str]) -> None:
    """One row per (i, j): lag, additive score contribution, weight factor exp(score)."""
    if isinstance(dest, (str, Path)):
        with open(dest, "w", newline="") as fh:
            write_mask_csv(mask, fh)
        return
    v = mask.values
    w = csv.writer(dest)
    w.writerow(["i", "j", "lag", "score", "weight_factor"])
    for i in range(mask.size):
        for j in range(mask.size):
            s = v[i, j]
            w.writerow([i, j, i - j, _fmt(s), _fmt(math.exp(s) if s > -np.inf else 0.0)])


def write_envelope_csv(spec: MaskSpec, lags: Iterable[int], path: str | Path) -> None:
    lags = np.asarray(list(lags), dtype=np.float64)
    score = decay_values(spec, lags)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lag", "score", "weight_factor"])
        for lag, s in zip(lags, score):
            w.writerow([int(lag), _fmt(s), _fmt(math.exp(s))])


def _fmt(x: float) -> str:
    if x == -np.inf:
        return "-inf"
    return repr(float(x))
