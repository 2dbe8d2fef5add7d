"""Flat ``key = value`` run configuration.

Grammar: one ``key = value`` pair per line; ``#`` starts a comment; blank
lines are ignored; keys are case-sensitive and must be known. Values are
parsed by the key's type. ``none`` clears optional integers.

Precedence when resolving: command-line override > config file > dataset
preset > built-in default.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Callable

from .masks import FAMILY_ALIASES, MaskSpec
from .model import COMMON_DEFAULTS, PRESETS, ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """A config key is unknown or its value cannot be parsed."""

    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


def _opt_int(s: str) -> int | None:
    return None if s.lower() in ("none", "") else int(s)


def _opt_float(s: str) -> float | None:
    return None if s.lower() in ("none", "") else float(s)


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_str(s: str) -> str | None:
    return None if s.lower() in ("none", "") else s


def _mask_family(s: str) -> str:
    if s not in FAMILY_ALIASES:
        raise ValueError(f"unknown mask family {s!r}")
    return s


# key -> (parser, built-in default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "dataset": (str, "synthetic"),
    "data_path": (_opt_str, None),
    "synthetic": (str, "sine_mixture"),
    "synthetic_steps": (int, 4000),
    "synthetic_channels": (int, 3),
    "synthetic_seed": (int, 0),
    "seq_len": (int, 336),
    "pred_len": (int, 96),
    "patch_len": (int, 16),
    "stride": (int, 8),
    "n_layers": (int, 3),
    "d_model": (int, 16),
    "n_heads": (int, 4),
    "d_ff": (int, 128),
    "dropout": (float, 0.3),
    "head_dropout": (float, 0.3),
    "mask": (_mask_family, "none"),
    "alpha": (float, 1.0),
    "order": (int, 2),
    "critical_time": (float, 10.0),
    "learnable_alpha": (_bool, False),
    "banded_tau": (_opt_int, None),
    "seed": (int, 2021),
    "epochs": (int, 100),
    "patience": (_opt_int, None),
    "lr": (float, 1e-4),
    "batch_size": (int, 128),
    "max_batches": (_opt_int, None),
    "eval_batch_size": (int, 256),
    "alpha_lr": (_opt_float, None),
    "alpha_drift_cap": (_opt_float, None),
    "out_dir": (str, "runs"),
}


def parse_value(key: str, raw: str) -> Any:
    if key not in SCHEMA:
        raise ConfigError(key, "unknown key")
    try:
        return SCHEMA[key][0](raw.strip())
    except ValueError as exc:
        raise ConfigError(key, f"bad value {raw.strip()!r} ({exc})") from None


def parse_config_text(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"line {lineno} is not 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        out[key] = parse_value(key, raw)
    return out


def load_config_file(path: str | Path) -> dict[str, Any]:
    return parse_config_text(Path(path).read_text())


def preset_defaults(dataset: str) -> dict[str, Any]:
    key = dataset.lower()
    if key not in PRESETS:
        return {}
    return {k: v for k, v in {**COMMON_DEFAULTS, **PRESETS[key]}.items() if k in SCHEMA}


def resolve(file_values: dict[str, Any] | None = None, overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    """Materialise every key with the documented precedence."""
    file_values = file_values or {}
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    for k in list(file_values) + list(overrides):
        if k not in SCHEMA:
            raise ConfigError(k, "unknown key")
    dataset = overrides.get("dataset", file_values.get("dataset", SCHEMA["dataset"][1]))
    cfg = {k: default for k, (_, default) in SCHEMA.items()}
    cfg.update(preset_defaults(dataset))
    cfg.update(file_values)
    cfg.update(overrides)
    return cfg


def to_configs(cfg: dict[str, Any]) -> tuple[ModelConfig, TrainConfig]:
    """Build model and training configs; contract violations name the key."""
    family = cfg["mask"]
    order = cfg["order"]
    if family in ("bw1", "bw2"):
        order = int(family[-1])
    try:
        mask = MaskSpec(family=family, alpha=cfg["alpha"], order=order,
                        critical_time=cfg["critical_time"], learnable=cfg["learnable_alpha"])
    except ValueError as exc:
        raise ConfigError("mask", str(exc)) from None
    model_keys = ("seq_len", "pred_len", "patch_len", "stride", "n_layers", "d_model", "n_heads",
                  "d_ff", "dropout", "head_dropout", "banded_tau", "seed")
    try:
        mc = ModelConfig(mask=mask, **{k: cfg[k] for k in model_keys})
    except ValueError as exc:
        raise ConfigError("model", str(exc)) from None
    train_keys = ("epochs", "patience", "lr", "batch_size", "max_batches", "eval_batch_size",
                  "alpha_lr", "alpha_drift_cap")
    try:
        tc = TrainConfig(**{k: cfg[k] for k in train_keys})
    except ValueError as exc:
        raise ConfigError("training", str(exc)) from None
    return mc, tc


def dump_config(cfg: dict[str, Any]) -> str:
    lines = []
    for k in SCHEMA:
        v = cfg[k]
        lines.append(f"{k} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"
