"""Multihead attention with additive causal/decay masks.

Scores follow ``S_h = K_h Q_h^T / sqrt(d_k)``: row ``i`` holds key ``i``
against every query ``j`` and is normalised by the row softmax, so entry
``(i, j)`` is the weight position ``i`` gives to position ``j``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .masks import ScoreMask, causal_mask
from .tensor import (
    NEG_INF,
    ContractError,
    ShapeError,
    Tensor,
    as_tensor,
    no_grad,
    softmax_lastdim,
)


@dataclass
class AttentionParams:
    """Projection weights for all heads.

    ``w_q``, ``w_k`` and ``w_v`` are d x (H * d_k); head ``h`` owns the
    column block ``[h * d_k, (h + 1) * d_k)``. ``w_a`` is (H * d_k) x d.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_a: Tensor
    n_heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v"):
            if getattr(self, name).shape != self.w_q.shape:
                raise ShapeError(f"{name} shape {getattr(self, name).shape} != {self.w_q.shape}")
        inner = self.w_q.shape[1]
        if inner % self.n_heads:
            raise ShapeError(f"projection width {inner} not divisible by {self.n_heads} heads")
        if self.w_a.shape != (inner, d):
            raise ShapeError(f"w_a must be {(inner, d)}, got {self.w_a.shape}")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1] // self.n_heads

    @classmethod
    def init(cls, d_model: int, n_heads: int, rng: np.random.Generator) -> AttentionParams:
        if d_model % n_heads:
            raise ShapeError(f"d_model {d_model} not divisible by {n_heads} heads")
        bound = 1.0 / math.sqrt(d_model)

        def mat():
            return Tensor(rng.uniform(-bound, bound, (d_model, d_model)), requires_grad=True)

        return cls(mat(), mat(), mat(), mat(), n_heads)

    def tensors(self) -> dict[str, Tensor]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_a": self.w_a}


@dataclass
class AttentionTrace:
    """Captured matrices for one layer/head; leading axes are batch axes."""

    layer: int
    head: int
    scores: np.ndarray
    post_scores: np.ndarray
    weights: np.ndarray
    pre_mask_weights: np.ndarray | None = None


@dataclass
class OpCounter:
    """Counts multiply-adds spent forming attention scores."""

    score_ops: int = 0
    score_entries: int = 0
    calls: list[tuple[int, int]] = field(default_factory=list)


def _check_input(x: Tensor, params: AttentionParams) -> None:
    if x.ndim < 2 or x.shape[-1] != params.d_model:
        raise ShapeError(f"input width {x.shape} does not match d_model={params.d_model}")


def project_qkv(x: Tensor, params: AttentionParams, head: int) -> tuple[Tensor, Tensor, Tensor]:
    """Per-head query, key and value projections, each (..., P, d_k)."""
    x = as_tensor(x)
    _check_input(x, params)
    if not 0 <= head < params.n_heads:
        raise ContractError(f"head {head} out of range for {params.n_heads} heads")
    cols = slice(head * params.d_k, (head + 1) * params.d_k)
    return x @ params.w_q[:, cols], x @ params.w_k[:, cols], x @ params.w_v[:, cols]


def attention_scores(q: Tensor, k: Tensor) -> Tensor:
    """``K Q^T / sqrt(d_k)`` over the last two axes."""
    q, k = as_tensor(q), as_tensor(k)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key widths differ: {q.shape} vs {k.shape}")
    return (k @ q.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))


def mask_buffer(mask: ScoreMask | Tensor | None) -> Tensor | None:
    """Score-buffer form of a mask: -inf replaced by the finite ``NEG_INF``."""
    if mask is None or isinstance(mask, Tensor):
        return mask
    return Tensor(np.where(np.isneginf(mask.values), NEG_INF, mask.values))


def _split_heads(t: Tensor, n_heads: int) -> Tensor:
    *lead, P, width = t.shape
    t = t.reshape(*lead, P, n_heads, width // n_heads)
    nd = t.ndim
    return t.swapaxes(nd - 3, nd - 2)  # (..., H, P, d_k)


def _merge_heads(t: Tensor) -> Tensor:
    nd = t.ndim
    t = t.swapaxes(nd - 3, nd - 2)  # (..., P, H, d_k)
    *lead, P, H, dk = t.shape
    return t.reshape(*lead, P, H * dk)


def wcmha_forward(
    x: Tensor,
    params: AttentionParams,
    mask: ScoreMask | Tensor | None,
    capture: bool = False,
    layer: int = 0,
    counter: OpCounter | None = None,
) -> tuple[Tensor, list[AttentionTrace] | None]:
    """Weighted causal multihead attention over ``x`` of shape (..., P, d).

    ``mask`` is the composed causal+decay mask (a :class:`ScoreMask`, or a
    P x P tensor already in score-buffer form when it must carry gradients).
    ``None`` gives unmasked attention. No dropout is applied to the weights.
    """
    x = as_tensor(x)
    _check_input(x, params)
    P = x.shape[-2]
    buf = mask_buffer(mask)
    if buf is not None and buf.shape != (P, P):
        raise ShapeError(f"mask is {buf.shape} but sequence has {P} tokens")

    H, dk = params.n_heads, params.d_k
    q = _split_heads(x @ params.w_q, H)
    k = _split_heads(x @ params.w_k, H)
    v = _split_heads(x @ params.w_v, H)
    scores = attention_scores(q, k)  # (..., H, P, P)
    if counter is not None:
        n_seq = math.prod(scores.shape[:-2])
        counter.score_ops += n_seq * P * P * dk
        counter.score_entries += n_seq * P * P
        counter.calls.append((P, P))
    post = scores + buf if buf is not None else scores
    weights = softmax_lastdim(post)
    out = _merge_heads(weights @ v) @ params.w_a

    traces = None
    if capture:
        with no_grad():
            causal_buf = mask_buffer(causal_mask(P)).data
            pre_w = softmax_lastdim(Tensor(scores.data + causal_buf)).data
        traces = [
            AttentionTrace(
                layer=layer,
                head=h,
                scores=scores.data[..., h, :, :].copy(),
                post_scores=post.data[..., h, :, :].copy(),
                weights=weights.data[..., h, :, :].copy(),
                pre_mask_weights=pre_w[..., h, :, :].copy(),
            )
            for h in range(H)
        ]
    return out, traces


def band_indices(P: int, tau: int) -> tuple[np.ndarray, np.ndarray]:
    """Key index ``i - l`` for each row ``i`` and lag ``l < tau`` (clipped), plus validity."""
    i = np.arange(P)[:, None]
    lag = np.arange(tau)[None, :]
    j = i - lag
    valid = j >= 0
    return np.where(valid, j, 0), valid


def wcmha_banded(
    x: Tensor,
    params: AttentionParams,
    mask: ScoreMask | Tensor,
    tau: int,
    counter: OpCounter | None = None,
) -> Tensor:
    """WCMHA restricted to lags ``0 <= i - j < tau``.

    Scores are formed only inside the band, so each head costs
    O(tau * P * d_k) instead of O(P^2 * d_k).
    """
    if tau < 1:
        raise ContractError(f"band cutoff tau must be >= 1, got {tau}")
    x = as_tensor(x)
    _check_input(x, params)
    P = x.shape[-2]
    buf = mask_buffer(mask)
    if buf.shape != (P, P):
        raise ShapeError(f"mask is {buf.shape} but sequence has {P} tokens")
    width = min(tau, P)
    jidx, valid = band_indices(P, width)
    rows = np.broadcast_to(np.arange(P)[:, None], jidx.shape)
    band_mask = buf[rows, jidx] + Tensor(np.where(valid, 0.0, NEG_INF))  # (P, width)

    H, dk = params.n_heads, params.d_k
    q = _split_heads(x @ params.w_q, H)
    k = _split_heads(x @ params.w_k, H)
    v = _split_heads(x @ params.w_v, H)
    q_band = q[..., jidx, :]  # (..., H, P, width, d_k)
    v_band = v[..., jidx, :]
    k_rows = k.reshape(*k.shape[:-1], 1, dk)
    scores = (k_rows * q_band).sum(axis=-1) * (1.0 / math.sqrt(dk))  # (..., H, P, width)
    if counter is not None:
        n_seq = math.prod(scores.shape[:-2])
        counter.score_ops += n_seq * P * width * dk
        counter.score_entries += n_seq * P * width
        counter.calls.append((P, width))
    weights = softmax_lastdim(scores + band_mask)
    heads = (weights.reshape(*weights.shape, 1) * v_band).sum(axis=-2)  # (..., H, P, d_k)
    return _merge_heads(heads) @ params.w_a


def traces_to_rows(traces: list[AttentionTrace]):
    """Flatten traces into (layer, head, lag, pre, post, weight) rows, causal entries only."""
    for tr in traces:
        P = tr.scores.shape[-1]
        lags = np.subtract.outer(np.arange(P), np.arange(P))
        keep = lags >= 0
        s = tr.scores.reshape(-1, P, P)
        ps = tr.post_scores.reshape(-1, P, P)
        w = tr.weights.reshape(-1, P, P)
        for b in range(s.shape[0]):
            for lag, a, c, d in zip(lags[keep], s[b][keep], ps[b][keep], w[b][keep]):
                yield tr.layer, tr.head, int(lag), float(a), float(c), float(d)


def write_trace_csv(traces: list[AttentionTrace], path) -> int:
    import csv

    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "head", "lag", "pre_mask_score", "post_mask_score", "weight"])
        for row in traces_to_rows(traces):
            w.writerow([row[0], row[1], row[2], repr(row[3]), repr(row[4]), repr(row[5])])
            n += 1
    return n
