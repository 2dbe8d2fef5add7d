"""Attention score/weight distributions, mode reports and envelope checks."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import attention_scores, mask_buffer
from .data import WindowedDataset
from .masks import MaskSpec, decay_values, full_mask
from .model import Powerformer
from .tensor import Tensor, no_grad, softmax_lastdim

WEIGHT_FLOOR = 1e-12
QUANTITIES = ("score_pre", "score_post", "weight_pre", "weight_post")


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    total: int
    tag: dict = field(default_factory=dict)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if len(self.edges) != len(self.counts) + 1:
            raise ValueError("need len(edges) == len(counts) + 1")
        if np.any(np.diff(self.edges) <= 0):
            raise ValueError("edges must be strictly increasing")
        if int(self.counts.sum()) != self.total:
            raise ValueError("counts must sum to total")

    @property
    def log_binned(self) -> bool:
        return bool(self.tag.get("log_bins", False))

    def centers(self) -> np.ndarray:
        if self.log_binned:
            return np.sqrt(self.edges[:-1] * self.edges[1:])
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def density(self) -> np.ndarray:
        return self.counts / max(self.total, 1)

    def merge(self, other: Histogram) -> Histogram:
        if not np.array_equal(self.edges, other.edges):
            raise ValueError("cannot merge histograms with different edges")
        return Histogram(self.edges, self.counts + other.counts, self.total + other.total, dict(self.tag))


def log_weight_edges(bins: int = 60) -> np.ndarray:
    return np.logspace(math.log10(WEIGHT_FLOOR), 0.0, bins + 1)


def linear_edges(values: np.ndarray, bins: int = 60) -> np.ndarray:
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi - lo < 1e-12 * max(1.0, abs(lo)):
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, bins + 1)


def histogram(values: np.ndarray, edges: np.ndarray, tag: dict | None = None) -> Histogram:
    """Count ``values`` into ``edges``; out-of-range values land in the end bins."""
    v = np.clip(np.ravel(values), edges[0], edges[-1])
    idx = np.searchsorted(edges, v, side="right") - 1
    idx = np.clip(idx, 0, len(edges) - 2)
    counts = np.bincount(idx, minlength=len(edges) - 1)
    return Histogram(edges, counts, int(v.size), dict(tag or {}))


def weight_histogram(values: np.ndarray, bins: int = 60, tag: dict | None = None) -> Histogram:
    tag = {**(tag or {}), "log_bins": True}
    return histogram(np.maximum(values, WEIGHT_FLOOR), log_weight_edges(bins), tag)


def total_variation(a: Histogram, b: Histogram) -> float:
    if not np.array_equal(a.edges, b.edges):
        raise ValueError("histograms need identical edges")
    return 0.5 * float(np.abs(a.density() - b.density()).sum())


# ---------------------------------------------------------------------------
# Collection
# ---------------------------------------------------------------------------


def capture_values(model: Powerformer, ds: WindowedDataset, batch_size: int = 64,
                   max_windows: int | None = None) -> dict[str, dict[int, list[np.ndarray]]]:
    """Causal-valid (j <= i) trace entries, keyed by quantity then layer."""
    n = len(ds) if max_windows is None else min(len(ds), max_windows)
    if n < 1:
        raise ValueError("empty split")
    P = model.cfg.n_patches
    keep = np.tril(np.ones((P, P), dtype=bool))
    out: dict[str, dict[int, list[np.ndarray]]] = {q: {} for q in QUANTITIES}
    with no_grad():
        for start in range(0, n, batch_size):
            x, _ = ds.batch(np.arange(start, min(start + batch_size, n)))
            _, traces = model.forward(x, training=False, capture=True)
            for tr in traces:
                for q, arr in (("score_pre", tr.scores), ("score_post", tr.post_scores),
                               ("weight_pre", tr.pre_mask_weights), ("weight_post", tr.weights)):
                    out[q].setdefault(tr.layer, []).append(arr[..., keep].ravel())
    return out


def collect_distributions(model: Powerformer, ds: WindowedDataset, bins: int = 60,
                          batch_size: int = 64, max_windows: int | None = None,
                          per_layer: bool = True) -> list[Histogram]:
    """Histograms of pre/post-mask scores and weights over a split.

    Scores use linear bins over the shared range of both score quantities;
    weights use log bins on [1e-12, 1]. The first histograms aggregate all
    layers and heads; per-layer ones follow when ``per_layer``.
    """
    vals = capture_values(model, ds, batch_size, max_windows)
    joined = {q: {l: np.concatenate(v) for l, v in per.items()} for q, per in vals.items()}
    all_scores = np.concatenate([a for q in ("score_pre", "score_post") for a in joined[q].values()])
    s_edges = linear_edges(all_scores, bins)
    hists = []
    layers = sorted(joined["score_pre"])
    scopes = [("all", None)] + ([(l, l) for l in layers] if per_layer else [])
    for scope, layer in scopes:
        for q in QUANTITIES:
            data = np.concatenate(list(joined[q].values())) if layer is None else joined[q][layer]
            tag = {"quantity": q, "layer": scope, "head": "all",
                   "mask_state": "post" if q.endswith("post") else "pre"}
            if q.startswith("weight"):
                hists.append(weight_histogram(data, bins, tag))
            else:
                hists.append(histogram(data, s_edges, tag))
    return hists


# ---------------------------------------------------------------------------
# Mode report
# ---------------------------------------------------------------------------


@dataclass
class ModeReport:
    modes: list[float]
    n_modes: int
    valley_depth: float
    bimodal: bool

    def to_dict(self) -> dict:
        return {"modes": self.modes, "n_modes": self.n_modes,
                "valley_depth": self.valley_depth, "bimodal": self.bimodal}


def bimodality_summary(hist: Histogram, smooth: int = 3, min_height: float = 0.05,
                       min_valley: float = 0.1) -> ModeReport:
    """Locate modes of a histogram after a short moving-average smooth.

    Peaks below ``min_height`` of the tallest are ignored, and neighbouring
    peaks not separated by a dip of at least ``min_valley`` (relative to
    the lower peak) are merged. Advisory only.
    """
    c = hist.counts.astype(np.float64)
    if c.sum() == 0:
        return ModeReport([], 0, 0.0, False)
    if smooth > 1:
        pad = smooth // 2
        cp = np.pad(c, pad, mode="constant")
        c = np.convolve(cp, np.ones(smooth) / smooth, mode="valid")[: len(hist.counts)]
    top = c.max()
    peaks = []
    i, n = 0, len(c)
    while i < n:
        j = i
        while j + 1 < n and c[j + 1] == c[i]:
            j += 1  # plateau
        left = c[i - 1] if i > 0 else -np.inf
        right = c[j + 1] if j + 1 < n else -np.inf
        if c[i] > left and c[i] > right and c[i] >= min_height * top:
            peaks.append((i + j) // 2)
        i = j + 1
    # merge peaks without a real valley between them
    merged: list[int] = []
    for p in peaks:
        if merged:
            q = merged[-1]
            valley = c[q : p + 1].min()
            if valley > (1 - min_valley) * min(c[q], c[p]):
                if c[p] > c[q]:
                    merged[-1] = p
                continue
        merged.append(p)
    centers = hist.centers()
    depth = 0.0
    if len(merged) >= 2:
        a, b = sorted(sorted(merged, key=lambda k: -c[k])[:2])
        depth = float(1.0 - c[a : b + 1].min() / min(c[a], c[b]))
    return ModeReport([float(centers[k]) for k in merged], len(merged), depth, len(merged) >= 2)


# ---------------------------------------------------------------------------
# Envelope check
# ---------------------------------------------------------------------------


def envelope_weights(spec: MaskSpec, P: int, row: int) -> np.ndarray:
    """Closed-form normalised weights ``exp(f(dt)) / sum`` for keys 0..row."""
    lags = (row - np.arange(row + 1)).astype(np.float64)
    e = np.exp(decay_values(spec, lags))
    return e / e.sum()


def realized_weights(spec: MaskSpec, P: int, seed: int = 0) -> np.ndarray:
    """Attention weights when every row of the score matrix is constant.

    With d_k = 1 and all queries equal to 1, ``S = K Q^T`` has
    ``S[i, j] = k_i`` for every j.
    """
    rng = np.random.default_rng(seed)
    q = Tensor(np.ones((P, 1)))
    k = Tensor(rng.uniform(-3, 3, (P, 1)))
    with no_grad():
        s = attention_scores(q, k)
        return softmax_lastdim(s + mask_buffer(full_mask(spec, P))).data


def mask_envelope_check(spec: MaskSpec, P: int, seed: int = 0) -> float:
    """Max abs deviation between realised weights and the closed-form envelope."""
    w = realized_weights(spec, P, seed)
    dev = 0.0
    for i in range(P):
        dev = max(dev, float(np.max(np.abs(w[i, : i + 1] - envelope_weights(spec, P, i)))))
        dev = max(dev, float(np.max(np.abs(w[i, i + 1 :]), initial=0.0)))
    return dev


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def hist_name(h: Histogram) -> str:
    return f"{h.tag.get('quantity', 'hist')}_layer{h.tag.get('layer', 'all')}"


def write_histogram_csv(h: Histogram, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["edge_lo", "edge_hi", "count"])
        for lo, hi, c in zip(h.edges[:-1], h.edges[1:], h.counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])


def export_histograms(hists: Sequence[Histogram], out_dir: str | Path,
                      reports: dict[str, dict] | None = None) -> Path:
    """CSV per histogram plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for h in hists:
        name = hist_name(h)
        write_histogram_csv(h, out / f"{name}.csv")
        entries.append({"name": name, "file": f"{name}.csv", "total": h.total, "tag": h.tag})
    manifest = {"histograms": entries, "mode_reports": reports or {}}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def histogram_svg(hists: Sequence[Histogram], title: str = "", width: int = 480, height: int = 300) -> str:
    """Step plot of normalised histograms sharing one x axis (log if log-binned)."""
    colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    log_x = all(h.log_binned for h in hists)
    ml, mr, mt, mb = 50, 15, 30, 35
    pw, ph = width - ml - mr, height - mt - mb

    def xmap(v):
        lo, hi = hists[0].edges[0], hists[0].edges[-1]
        if log_x:
            return ml + pw * (math.log10(v) - math.log10(lo)) / (math.log10(hi) - math.log10(lo))
        return ml + pw * (v - lo) / (hi - lo)

    ymax = max(float(h.density().max()) for h in hists) or 1.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13" '
        f'font-family="sans-serif">{title}</text>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    lo, hi = hists[0].edges[0], hists[0].edges[-1]
    for label, v in (("lo", lo), ("hi", hi)):
        parts.append(
            f'<text x="{xmap(v):.1f}" y="{height - 12}" text-anchor="middle" font-size="10" '
            f'font-family="sans-serif">{v:.3g}</text>'
        )
    for k, h in enumerate(hists):
        d = h.density()
        pts = []
        for lo_e, hi_e, y in zip(h.edges[:-1], h.edges[1:], d):
            yy = mt + ph * (1 - y / ymax)
            pts.append(f"{xmap(lo_e):.2f},{yy:.2f}")
            pts.append(f"{xmap(hi_e):.2f},{yy:.2f}")
        colour = colours[k % len(colours)]
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.2" points="{" ".join(pts)}"/>')
        parts.append(
            f'<text x="{ml + 5}" y="{mt + 14 + 12 * k}" font-size="10" fill="{colour}" '
            f'font-family="sans-serif">{hist_name(h)}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
