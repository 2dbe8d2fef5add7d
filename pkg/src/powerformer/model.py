"""Encoder-only forecaster: patch tokens -> WCMHA encoder -> linear head."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .attention import AttentionParams, OpCounter, mask_buffer, wcmha_banded, wcmha_forward
from .masks import MaskSpec, decay_alpha_derivative, decay_values, full_mask, lag_matrix
from .patching import PatchConfig, denormalize, instance_normalize, patchify
from .tensor import NEG_INF, ContractError, ShapeError, Tensor, dropout, gelu, layer_norm

# Architecture and training defaults per benchmark dataset.
PRESETS: dict[str, dict[str, Any]] = {
    "etth1": dict(d_model=16, n_heads=4, d_ff=128, dropout=0.3, head_dropout=0.3, patience=None, batch_size=128),
    "etth2": dict(d_model=16, n_heads=4, d_ff=128, dropout=0.3, head_dropout=0.3, patience=None, batch_size=128),
    "ettm1": dict(d_model=128, n_heads=16, d_ff=256, dropout=0.2, head_dropout=0.2, patience=20, batch_size=128),
    "ettm2": dict(d_model=128, n_heads=16, d_ff=256, dropout=0.2, head_dropout=0.2, patience=20, batch_size=128),
    "weather": dict(d_model=128, n_heads=16, d_ff=256, dropout=0.2, head_dropout=0.2, patience=20, batch_size=128),
    "electricity": dict(d_model=128, n_heads=16, d_ff=256, dropout=0.2, head_dropout=0.2, patience=10, batch_size=32),
    "traffic": dict(d_model=128, n_heads=16, d_ff=256, dropout=0.2, head_dropout=0.2, patience=10, batch_size=24),
}
COMMON_DEFAULTS = dict(patch_len=16, stride=8, n_layers=3, epochs=100, lr=1e-4)


@dataclass(frozen=True)
class ModelConfig:
    seq_len: int = 336
    pred_len: int = 96
    patch_len: int = 16
    stride: int = 8
    n_layers: int = 3
    d_model: int = 16
    n_heads: int = 4
    d_ff: int = 128
    dropout: float = 0.3
    head_dropout: float = 0.3
    mask: MaskSpec = field(default_factory=MaskSpec)
    banded_tau: int | None = None
    seed: int = 2021

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model {self.d_model} must be divisible by n_heads {self.n_heads}")
        if self.pred_len < 1:
            raise ContractError("pred_len must be >= 1")
        if self.banded_tau is not None and self.banded_tau < 1:
            raise ContractError("banded_tau must be >= 1")
        for name in ("dropout", "head_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ContractError(f"{name} must be in [0, 1)")
        self.patch  # validates patch geometry

    @property
    def patch(self) -> PatchConfig:
        return PatchConfig(self.patch_len, self.stride, self.d_model, self.seq_len)

    @property
    def n_patches(self) -> int:
        return self.patch.n_patches

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["mask"] = dataclasses.asdict(self.mask)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ModelConfig:
        d = dict(d)
        if isinstance(d.get("mask"), dict):
            d["mask"] = MaskSpec(**d["mask"])
        return cls(**d)

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    @classmethod
    def preset(cls, name: str, **overrides) -> ModelConfig:
        key = name.lower()
        if key not in PRESETS:
            raise ContractError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
        fields = {f.name for f in dataclasses.fields(cls)}
        base = {k: v for k, v in {**COMMON_DEFAULTS, **PRESETS[key]}.items() if k in fields}
        base.update(overrides)
        return cls(**base)


@dataclass
class Forecast:
    """Predicted series in original units, shape (..., channels, pred_len)."""

    values: np.ndarray


def learnable_mask_tensor(spec: MaskSpec, alpha: Tensor, P: int) -> Tensor:
    """Composed causal+decay score buffer whose entries depend on ``alpha``.

    Forward values are bit-identical to the constant-alpha buffer; the
    backward pass uses the closed-form derivative of the decay in alpha.
    """
    a = float(alpha.data)
    lags = lag_matrix(P)
    lower = lags >= 0
    lower_lags = lags[lower].astype(np.float64)
    cur = spec.with_alpha(a)
    vals = np.full((P, P), NEG_INF)
    vals[lower] = decay_values(cur, lower_lags)
    dvals = np.zeros((P, P))
    dvals[lower] = decay_alpha_derivative(cur, lower_lags)

    def bw(g):
        alpha._accum(np.asarray(np.sum(g * dvals)).reshape(alpha.shape))

    return Tensor._make(vals, (alpha,), bw, "decay_mask")


class Powerformer:
    """Channel-independent encoder-only forecaster.

    Input windows have shape (channels, seq_len) or (batch, channels,
    seq_len); forecasts keep the leading axes and end in pred_len.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        seeds = np.random.SeedSequence(cfg.seed).spawn(2)
        init_rng = np.random.default_rng(seeds[0])
        self.dropout_rng = np.random.default_rng(seeds[1])
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        N, P, p = cfg.d_model, cfg.n_patches, cfg.patch_len

        def uniform(name, shape, bound):
            self.params[name] = Tensor(init_rng.uniform(-bound, bound, shape), requires_grad=True, name=name)

        def const(name, shape, value):
            self.params[name] = Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True, name=name)

        uniform("embed.w", (p, N), 1 / math.sqrt(p))
        uniform("embed.b", (N,), 1 / math.sqrt(p))
        uniform("pos", (P, N), 0.02)
        for l in range(cfg.n_layers):
            pre = f"layers.{l}."
            for w in ("w_q", "w_k", "w_v", "w_a"):
                uniform(pre + "attn." + w, (N, N), 1 / math.sqrt(N))
            const(pre + "norm1.gamma", (N,), 1.0)
            const(pre + "norm1.beta", (N,), 0.0)
            uniform(pre + "ff.w1", (N, cfg.d_ff), 1 / math.sqrt(N))
            uniform(pre + "ff.b1", (cfg.d_ff,), 1 / math.sqrt(N))
            uniform(pre + "ff.w2", (cfg.d_ff, N), 1 / math.sqrt(cfg.d_ff))
            uniform(pre + "ff.b2", (N,), 1 / math.sqrt(cfg.d_ff))
            const(pre + "norm2.gamma", (N,), 1.0)
            const(pre + "norm2.beta", (N,), 0.0)
        uniform("head.w", (P * N, cfg.pred_len), 1 / math.sqrt(P * N))
        uniform("head.b", (cfg.pred_len,), 1 / math.sqrt(P * N))

        self.alpha: Tensor | None = None
        if cfg.mask.learnable:
            self.alpha = Tensor(np.float64(cfg.mask.alpha), requires_grad=True, name="mask.alpha")
        self._static_mask = mask_buffer(full_mask(cfg.mask, P))

    # -- parameters -------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
        if self.alpha is not None:
            self.alpha.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.params.items()}
        if self.alpha is not None:
            out["mask.alpha"] = self.alpha.data.copy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            if k == "mask.alpha":
                if self.alpha is None:
                    raise KeyError("checkpoint carries mask.alpha but mask is not learnable")
                self.alpha.data = np.array(v, dtype=np.float64).reshape(())
                continue
            if k not in self.params:
                raise KeyError(f"unknown parameter {k!r}")
            if self.params[k].shape != tuple(np.shape(v)):
                raise ShapeError(f"{k}: expected {self.params[k].shape}, got {np.shape(v)}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for k, v in self.state_arrays().items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def attention_params(self, layer: int) -> AttentionParams:
        pre = f"layers.{layer}.attn."
        return AttentionParams(
            self.params[pre + "w_q"], self.params[pre + "w_k"], self.params[pre + "w_v"],
            self.params[pre + "w_a"], self.cfg.n_heads,
        )

    def mask_tensor(self) -> Tensor:
        if self.alpha is not None:
            return learnable_mask_tensor(self.cfg.mask, self.alpha, self.cfg.n_patches)
        return self._static_mask

    # -- forward ----------------------------------------------------------
    def encode(self, tokens: Tensor, training: bool = False, capture: bool = False,
               counter: OpCounter | None = None):
        cfg, prm = self.cfg, self.params
        rng = self.dropout_rng
        mask = self.mask_tensor()
        traces = [] if capture else None
        h = tokens
        for l in range(cfg.n_layers):
            pre = f"layers.{l}."
            attn = self.attention_params(l)
            if cfg.banded_tau is not None and not capture:
                a = wcmha_banded(h, attn, mask, cfg.banded_tau, counter=counter)
            else:
                a, tr = wcmha_forward(h, attn, mask, capture=capture, layer=l, counter=counter)
                if capture:
                    traces.extend(tr)
            h = layer_norm(h + dropout(a, cfg.dropout, rng, training),
                           prm[pre + "norm1.gamma"], prm[pre + "norm1.beta"])
            f = gelu(h @ prm[pre + "ff.w1"] + prm[pre + "ff.b1"])
            f = dropout(f, cfg.dropout, rng, training)
            f = f @ prm[pre + "ff.w2"] + prm[pre + "ff.b2"]
            h = layer_norm(h + dropout(f, cfg.dropout, rng, training),
                           prm[pre + "norm2.gamma"], prm[pre + "norm2.beta"])
        return h, traces

    def forward(self, x, training: bool = False, capture: bool = False,
                counter: OpCounter | None = None):
        """Return (forecast tensor, traces or None)."""
        cfg, prm = self.cfg, self.params
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float64))
        if x.shape[-1] != cfg.seq_len:
            raise ShapeError(f"window length {x.shape[-1]} != seq_len {cfg.seq_len}")
        if np.isnan(x.data).any():
            raise ValueError("input window contains NaN")
        z, stats = instance_normalize(x)
        tokens = patchify(z, cfg.patch, prm["embed.w"], prm["pos"], prm["embed.b"])
        h, traces = self.encode(tokens, training=training, capture=capture, counter=counter)
        flat = h.reshape(*h.shape[:-2], cfg.n_patches * cfg.d_model)
        flat = dropout(flat, cfg.head_dropout, self.dropout_rng, training)
        y = flat @ prm["head.w"] + prm["head.b"]
        return denormalize(y, stats), traces

    __call__ = forward

    def predict(self, x) -> Forecast:
        from .tensor import no_grad

        with no_grad():
            y, _ = self.forward(x, training=False)
        return Forecast(y.data)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"POWERFORMER-CKPT 1\n"


def save_checkpoint(path: str | Path, model: Powerformer, step: int = 0,
                    extra: dict[str, Any] | None = None) -> None:
    """Write header JSON plus raw little-endian float64 parameter data.

    Layout: magic line, 8-byte little-endian header length, UTF-8 JSON
    header, then every tensor's row-major data back to back.
    """
    arrays = model.state_arrays()
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(data.size)})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = {
        "format": 1,
        "config": model.cfg.to_dict(),
        "seed": model.cfg.seed,
        "step": int(step),
        "params": entries,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)


def read_checkpoint(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise ValueError(f"{path} is not a checkpoint file")
    pos = len(CKPT_MAGIC)
    (hlen,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    arrays = {}
    for e in header["params"]:
        start = pos + e["offset"]
        data = np.frombuffer(raw, dtype="<f8", count=e["count"], offset=start)
        arrays[e["name"]] = data.astype(np.float64).reshape(e["shape"])
    return header, arrays


def load_checkpoint(path: str | Path) -> tuple[Powerformer, dict[str, Any]]:
    header, arrays = read_checkpoint(path)
    model = Powerformer(ModelConfig.from_dict(header["config"]))
    model.load_state_arrays(arrays)
    return model, header
