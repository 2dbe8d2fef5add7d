"""Command-line entry point: train, evaluate, analyze, autocorr, mask-dump.

Exit codes: 0 ok, 1 config error, 2 data/artifact error, 3 divergence.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence


from . import __version__
from .analysis import bimodality_summary, collect_distributions, export_histograms, hist_name, histogram_svg
from .config import ConfigError, dump_config, load_config_file, parse_value, resolve, to_configs
from .data import (
    SYNTHETIC,
    DataError,
    RawDataset,
    autocorrelation_by_lag,
    default_splits,
    load_csv,
    split_and_standardize,
    split_scheme,
    write_autocorr_csv,
)
from .masks import FAMILY_ALIASES, MaskSpec, full_mask, write_mask_csv
from .model import load_checkpoint, save_checkpoint
from .training import (
    DivergenceError,
    RunRecord,
    Windows,
    evaluate_protocol,
    train,
    write_results_csv,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("powerformer")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def load_dataset(cfg: dict[str, Any]) -> RawDataset:
    if cfg.get("data_path"):
        path = Path(cfg["data_path"])
        if not path.exists():
            raise CliError(EXIT_DATA, f"dataset not found: {path}")
        return load_csv(path, name=cfg["dataset"])
    if cfg["dataset"] != "synthetic":
        raise CliError(EXIT_DATA, f"dataset {cfg['dataset']!r} needs data_path")
    gen = SYNTHETIC.get(cfg["synthetic"])
    if gen is None:
        raise ConfigError("synthetic", f"unknown generator {cfg['synthetic']!r}; known: {sorted(SYNTHETIC)}")
    ds = gen(n_steps=cfg["synthetic_steps"], n_channels=cfg["synthetic_channels"], seed=cfg["synthetic_seed"])
    ds.name = "synthetic"
    return ds


def build_windows(cfg: dict[str, Any]) -> Windows:
    ds = load_dataset(cfg)
    spec = default_splits(len(ds.values), cfg["seq_len"], split_scheme(cfg["dataset"]))
    splits = split_and_standardize(ds, spec)
    return Windows.from_splits(splits, cfg["seq_len"], cfg["pred_len"], name=cfg["dataset"])


def run_dir_for(cfg: dict[str, Any], digest: str) -> Path:
    return Path(cfg["out_dir"]) / f"{cfg['dataset']}_{digest}_s{cfg['seed']}"


def write_manifest(path: Path, cfg: dict[str, Any], artifacts: dict[str, str]) -> None:
    manifest = {
        "config": cfg,
        "artifacts": artifacts,
        "tool_version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _collect_overrides(args: argparse.Namespace) -> dict[str, Any]:
    over: dict[str, Any] = {}
    for key in ("seed", "mask", "alpha", "epochs", "lr", "seq_len", "pred_len", "out_dir",
                "data_path", "dataset", "batch_size", "max_batches"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = parse_value(key, str(val))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(item, "--set expects key=value")
        k, v = item.split("=", 1)
        over[k.strip()] = parse_value(k.strip(), v)
    return over


def resolve_args(args: argparse.Namespace) -> dict[str, Any]:
    file_values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError("config", f"config file not found: {path}")
        file_values = load_config_file(path)
    return resolve(file_values, _collect_overrides(args))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_args(args)
    model_cfg, train_cfg = to_configs(cfg)
    windows = build_windows(cfg)
    run_dir = run_dir_for(cfg, model_cfg.digest())
    run_dir.mkdir(parents=True, exist_ok=True)
    rec, model = train(model_cfg, train_cfg, windows)
    ckpt = run_dir / "checkpoint.bin"
    save_checkpoint(ckpt, model, step=rec.stopped_epoch, extra={"best_epoch": rec.best_epoch})
    rec.checkpoint = ckpt.name
    rec.save(run_dir / "record.json")
    (run_dir / "config.txt").write_text(dump_config(cfg))
    write_manifest(run_dir / "manifest.json", cfg,
                   {"checkpoint": "checkpoint.bin", "record": "record.json", "config": "config.txt"})
    print(f"{run_dir}  test_mse={rec.test_mse:.6f} test_mae={rec.test_mae:.6f}")
    return EXIT_OK


def _find_records(paths: Sequence[str]) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if p.is_file() and p.name == "record.json":
            found.append(p)
        elif p.is_dir():
            found.extend(sorted(p.rglob("record.json")))
        else:
            raise CliError(EXIT_DATA, f"no run records at {p}")
    if not found:
        raise CliError(EXIT_DATA, f"no run records under {', '.join(paths)}")
    return found


def cmd_evaluate(args: argparse.Namespace) -> int:
    records = []
    for path in _find_records(args.runs):
        rec = RunRecord.load(path)
        if rec.checkpoint and not (path.parent / rec.checkpoint).exists():
            raise CliError(EXIT_DATA, f"missing checkpoint {path.parent / rec.checkpoint}")
        records.append(rec)
    result = evaluate_protocol(records)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_results_csv(result.table, out)
    if args.all:
        write_results_csv(result.aggregated, Path(args.all))
    for ds, sl in sorted(result.selected_seq_len.items()):
        print(f"{ds}: seq_len={sl}")
    print(f"wrote {out} ({len(result.table)} rows)")
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    run = Path(args.run)
    ckpt = run / "checkpoint.bin"
    manifest = run / "manifest.json"
    if not ckpt.exists():
        raise CliError(EXIT_DATA, f"missing checkpoint {ckpt}")
    if not manifest.exists():
        raise CliError(EXIT_DATA, f"missing manifest {manifest}")
    cfg = json.loads(manifest.read_text())["config"]
    model, _ = load_checkpoint(ckpt)
    windows = build_windows(cfg)
    hists = collect_distributions(model, windows.test, bins=args.bins, max_windows=args.max_windows)
    reports = {hist_name(h): bimodality_summary(h).to_dict() for h in hists if h.log_binned}
    out = Path(args.out) if args.out else run / "analysis"
    export_histograms(hists, out, reports)
    for quantity in ("score", "weight"):
        group = [h for h in hists if h.tag["layer"] == "all" and h.tag["quantity"].startswith(quantity)]
        (out / f"{quantity}_distributions.svg").write_text(
            histogram_svg(group, title=f"{quantity} distribution (pre vs post mask)")
        )
    print(f"wrote {len(hists)} histograms to {out}")
    return EXIT_OK


def cmd_autocorr(args: argparse.Namespace) -> int:
    if args.data:
        path = Path(args.data)
        if not path.exists():
            raise CliError(EXIT_DATA, f"dataset not found: {path}")
        ds = load_csv(path)
    else:
        ds = load_dataset(resolve_args(args))
    corr = autocorrelation_by_lag(ds, args.max_lag)
    write_autocorr_csv(corr, ds.columns, args.out)
    print(f"wrote {args.out} ({len(ds.columns)} channels x {args.max_lag + 1} lags)")
    return EXIT_OK


def cmd_mask_dump(args: argparse.Namespace) -> int:
    family = args.mask
    order = int(family[-1]) if family in ("bw1", "bw2") else args.order
    try:
        spec = MaskSpec(family=family, alpha=args.alpha, order=order, critical_time=args.critical_time)
        mask = full_mask(spec, args.P)
    except ValueError as exc:
        raise ConfigError("mask", str(exc)) from None
    if args.out == "-":
        write_mask_csv(mask, sys.stdout)
    else:
        write_mask_csv(mask, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="powerformer", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        sp.add_argument("--dataset")
        sp.add_argument("--data-path", dest="data_path")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--mask", choices=sorted(FAMILY_ALIASES))
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--seq-len", dest="seq_len", type=int)
        sp.add_argument("--pred-len", dest="pred_len", type=int)
        sp.add_argument("--batch-size", dest="batch_size", type=int)
        sp.add_argument("--max-batches", dest="max_batches", type=int)
        sp.add_argument("--out-dir", dest="out_dir")

    t = sub.add_parser("train", help="train one run and write checkpoint, record and manifest")
    config_args(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="aggregate run records into a results table")
    e.add_argument("runs", nargs="+", help="run directories or record.json files")
    e.add_argument("--out", default="results.csv")
    e.add_argument("--all", help="also write every aggregated cell to this CSV")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("analyze", help="attention score/weight histograms for a trained run")
    a.add_argument("run", help="run directory")
    a.add_argument("--bins", type=int, default=60)
    a.add_argument("--max-windows", dest="max_windows", type=int)
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("autocorr", help="per-channel autocorrelation by lag")
    config_args(c)
    c.add_argument("--data", help="CSV file (overrides --config dataset)")
    c.add_argument("--max-lag", dest="max_lag", type=int, default=720)
    c.add_argument("--out", default="autocorr.csv")
    c.set_defaults(func=cmd_autocorr)

    m = sub.add_parser("mask-dump", help="write a composed causal+decay mask as CSV")
    m.add_argument("--mask", default="none", choices=sorted(FAMILY_ALIASES))
    m.add_argument("--alpha", type=float, default=1.0)
    m.add_argument("--order", type=int, default=2)
    m.add_argument("--critical-time", dest="critical_time", type=float, default=10.0)
    m.add_argument("--P", type=int, required=True)
    m.add_argument("--out", default="-")
    m.set_defaults(func=cmd_mask_dump)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
