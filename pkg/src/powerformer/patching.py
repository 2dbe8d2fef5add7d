"""Per-window instance normalisation and strided patch embedding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, ShapeError, Tensor, as_tensor

NORM_EPS = 1e-5


@dataclass(frozen=True)
class PatchConfig:
    patch_len: int = 16
    stride: int = 8
    embed_width: int = 16
    seq_len: int = 336

    def __post_init__(self):
        if self.stride < 1:
            raise ContractError(f"stride must be >= 1, got {self.stride}")
        if self.patch_len < 1 or self.patch_len > self.seq_len:
            raise ContractError(
                f"patch_len {self.patch_len} must lie in [1, seq_len={self.seq_len}]"
            )

    @property
    def n_patches(self) -> int:
        return patch_count(self.seq_len, self.patch_len, self.stride)


def patch_count(seq_len: int, patch_len: int, stride: int) -> int:
    """Number of full windows; a trailing remainder shorter than a stride is dropped."""
    if patch_len > seq_len:
        raise ContractError(f"patch_len {patch_len} exceeds seq_len {seq_len}")
    return (seq_len - patch_len) // stride + 1


def patch_index(cfg: PatchConfig) -> np.ndarray:
    """(P, p) array of time indices; row k covers ``[k*s, k*s + p)``."""
    starts = np.arange(cfg.n_patches) * cfg.stride
    return starts[:, None] + np.arange(cfg.patch_len)[None, :]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def instance_normalize(x, eps: float = NORM_EPS):
    """Standardise each series along its last (time) axis.

    Uses the population standard deviation, clamped below at ``eps``. The
    statistics are treated as constants when ``x`` is a tensor.
    """
    if isinstance(x, Tensor):
        arr = x.data
    else:
        arr = np.asarray(x, dtype=np.float64)
    if arr.shape[-1] < 2:
        raise ContractError("instance normalisation needs at least 2 time steps")
    mean = arr.mean(axis=-1, keepdims=True)
    std = np.maximum(arr.std(axis=-1, keepdims=True), eps)
    stats = NormStats(mean, std)
    if isinstance(x, Tensor):
        return (x - mean) * (1.0 / std), stats
    return (arr - mean) / std, stats


def denormalize(y, stats: NormStats):
    if isinstance(y, Tensor):
        return y * stats.std + stats.mean
    return np.asarray(y, dtype=np.float64) * stats.std + stats.mean


def patchify(
    z,
    cfg: PatchConfig,
    w_embed: Tensor,
    pos: Tensor,
    b_embed: Tensor | None = None,
) -> Tensor:
    """Embed strided windows of ``z`` (..., T) into tokens (..., P, N).

    Equivalent to a width-``p`` convolution with ``N`` filters and stride
    ``s``, followed by an additive positional embedding.
    """
    z = as_tensor(z)
    if z.shape[-1] != cfg.seq_len:
        raise ShapeError(f"series length {z.shape[-1]} != seq_len {cfg.seq_len}")
    if w_embed.shape != (cfg.patch_len, cfg.embed_width):
        raise ShapeError(f"w_embed must be {(cfg.patch_len, cfg.embed_width)}, got {w_embed.shape}")
    if pos.shape != (cfg.n_patches, cfg.embed_width):
        raise ShapeError(f"pos must be {(cfg.n_patches, cfg.embed_width)}, got {pos.shape}")
    windows = z[..., patch_index(cfg)]  # (..., P, p)
    tokens = windows @ w_embed
    if b_embed is not None:
        tokens = tokens + b_embed
    return tokens + pos
