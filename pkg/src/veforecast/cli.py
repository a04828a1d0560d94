"""Command-line entry point tying data, models, training and analysis together.

Subcommands: train, eval, grid-search, prepare-mixed, analyze. Every command
writes a self-describing artifact directory: the resolved configuration, a
manifest with the package version and input data hashes, machine-readable
results, and rendered figures next to the delimited exports. Wall-clock
timings go to a separate timing.json so result files stay byte-reproducible.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
Relative dataset paths fall back to the VE_FORECAST_DATA_DIR directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    embedding_cosine_similarity,
    export_gate_weights,
    export_similarity,
    export_weight_magnitude,
    gate_weight_table,
    model_mixture_head,
    weighted_weight_magnitude,
    write_manifest,
)
from .config import ExperimentConfig, load_config_file, resolve_config, write_config
from .data import build_mixed_dataset, dataset_fingerprint, load_csv, prepare_forecast_splits
from .errors import ConfigError, DataError, NumericError, VEForecastError
from .figures import (
    gate_heatmap,
    grid_heatmap,
    magnitude_map,
    similarity_heatmap,
    training_curves,
)
from .models import create_model
from .serialize import load_model, model_fingerprint, save_model
from .synthetic import write_csv
from .training import GridEntry, RunMetrics, evaluate, grid_search, run_experiment, train_model

DATA_DIR_ENV = "VE_FORECAST_DATA_DIR"


def resolve_data_path(path_str: str) -> Path:
    """The path itself, or the same path under VE_FORECAST_DATA_DIR."""
    path = Path(path_str)
    if path.exists():
        return path
    root = os.environ.get(DATA_DIR_ENV)
    if root and not path.is_absolute():
        candidate = Path(root) / path
        if candidate.exists():
            return candidate
    hint = f" (also tried under {DATA_DIR_ENV})" if root else ""
    raise DataError(f"dataset file not found: {path_str}{hint}")


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _metrics_payload(metrics: RunMetrics) -> dict:
    # wall clock is reported separately so this file is run-to-run identical
    return {
        "test_mse": metrics.test_mse,
        "val_mse": metrics.val_mse,
        "param_count": metrics.param_count,
        "seed": metrics.seed,
        "train_history": list(metrics.train_history),
        "val_history": list(metrics.val_history),
    }


def _manifest(command: str, datasets=(), extra=None) -> dict:
    payload = {
        "command": command,
        "version": __version__,
        "inputs": [
            {
                "name": ds.name,
                "rows": ds.length,
                "channels": ds.channels,
                "sha256": dataset_fingerprint(ds),
            }
            for ds in datasets
        ],
    }
    payload.update(extra or {})
    return payload


def _gather_overrides(args) -> dict:
    pairs = [
        ("dataset.path", "dataset"),
        ("dataset.kind", "dataset_kind"),
        ("model.backbone", "backbone"),
        ("model.kernel", "kernel"),
        ("model.cutoff", "cutoff"),
        ("model.revin", "revin"),
        ("head.variant", "head"),
        ("head.k", "k"),
        ("head.p", "p"),
        ("train.seed", "seed"),
        ("train.epochs", "epochs"),
        ("train.lr", "lr"),
        ("train.batch", "batch"),
        ("train.head_lr", "head_lr"),
        ("window.lookback", "lookback"),
        ("window.horizon", "horizon"),
        ("output.dir", "out"),
        ("grid.k_set", "k_set"),
        ("grid.p_set", "p_set"),
        ("grid.seeds", "seeds"),
    ]
    overrides = {}
    for key, attr in pairs:
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    return overrides


def _load_experiment(args) -> ExperimentConfig:
    file_values = load_config_file(args.config) if args.config else None
    return resolve_config(file_values, _gather_overrides(args))


def _require_dataset(cfg: ExperimentConfig):
    if not cfg.dataset_path:
        raise ConfigError("dataset.path is required (set it in the config file or via --dataset)")
    return load_csv(resolve_data_path(cfg.dataset_path))


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    started = time.perf_counter()
    cfg = _load_experiment(args)
    ds = _require_dataset(cfg)
    out = _out_dir(cfg)
    model_cfg = cfg.model_config(ds.channels)
    model, metrics, _ = run_experiment(ds, cfg.split_spec(), model_cfg, cfg.train_config())

    save_model(out / "checkpoint.vef", model)
    _write_json(out / "metrics.json", _metrics_payload(metrics))
    write_config(out / "config.toml", cfg)
    write_manifest(
        out / "manifest.json",
        _manifest("train", [ds], {"checkpoint_sha256": model_fingerprint(model)}),
    )
    training_curves(metrics.train_history, metrics.val_history, out / "training_curve.png")
    _write_json(
        out / "timing.json", {"wall_clock_seconds": time.perf_counter() - started}
    )
    print(f"test_mse={metrics.test_mse:.6f} val_mse={metrics.val_mse:.6f} -> {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_experiment(args)
    model = load_model(resolve_data_path(args.checkpoint))
    ds = _require_dataset(cfg)
    if ds.channels != model.config.C:
        raise DataError(
            f"dataset has {ds.channels} channels but the checkpoint expects {model.config.C}"
        )
    splits = prepare_forecast_splits(ds, cfg.split_spec(), model.config.L, model.config.H)
    out = _out_dir(cfg)
    payload = {
        "val_mse": evaluate(model, splits.val),
        "test_mse": evaluate(model, splits.test),
        "checkpoint": str(args.checkpoint),
    }
    _write_json(out / "eval.json", payload)
    write_manifest(out / "manifest.json", _manifest("eval", [ds]))
    print(f"test_mse={payload['test_mse']:.6f} -> {out / 'eval.json'}")
    return 0


def _cell_path(cells_dir: Path, k: int, p: float) -> Path:
    return cells_dir / f"k{k}_p{str(p).replace('.', 'p')}.json"


def _entry_payload(entry: GridEntry) -> dict:
    return {
        "k": entry.k,
        "p": entry.p,
        "val_mse": entry.val_mse,
        "test_mse": entry.test_mse,
        "param_count": entry.param_count,
        "runs": [
            {"seed": r.seed, "val_mse": r.val_mse, "test_mse": r.test_mse}
            for r in entry.runs
        ],
    }


def _entry_from_payload(payload: dict) -> GridEntry:
    runs = tuple(
        RunMetrics(
            test_mse=r["test_mse"],
            val_mse=r["val_mse"],
            param_count=payload["param_count"],
            seed=r["seed"],
            wall_clock_seconds=0.0,
        )
        for r in payload["runs"]
    )
    return GridEntry(
        k=payload["k"],
        p=payload["p"],
        val_mse=payload["val_mse"],
        test_mse=payload["test_mse"],
        param_count=payload["param_count"],
        runs=runs,
    )


def _load_completed_cells(cells_dir: Path) -> dict:
    completed = {}
    for path in sorted(cells_dir.glob("k*_p*.json")):
        with open(path) as fh:
            payload = json.load(fh)
        if "error" in payload:
            continue  # failed cells are retried on resume
        completed[(payload["k"], payload["p"])] = _entry_from_payload(payload)
    return completed


def cmd_grid(args) -> int:
    started = time.perf_counter()
    cfg = _load_experiment(args)
    ds = _require_dataset(cfg)
    out = _out_dir(cfg)
    cells_dir = out / "cells"
    cells_dir.mkdir(exist_ok=True)

    splits = prepare_forecast_splits(ds, cfg.split_spec(), cfg.lookback, cfg.horizon)
    model_cfg = cfg.model_config(ds.channels)
    train_cfg = cfg.train_config()
    precomputed = _load_completed_cells(cells_dir)

    def record(k, p, entry, error):
        if entry is not None:
            _write_json(_cell_path(cells_dir, k, p), _entry_payload(entry))
        else:
            _write_json(_cell_path(cells_dir, k, p), {"k": k, "p": p, "error": error})

    def run_cell(k, p, seed):
        local_cfg = replace(model_cfg, k=k, p=p)
        model = create_model(local_cfg, np.random.default_rng([seed, 0]))
        _, metrics = train_model(model, splits, replace(train_cfg, seed=seed))
        return metrics

    if args.jobs > 1:
        result = _parallel_grid(cfg, run_cell, precomputed, record, args.jobs)
    else:
        result = grid_search(
            model_cfg,
            splits,
            train_cfg,
            k_set=cfg.k_set,
            p_set=cfg.p_set,
            seeds=cfg.seeds,
            run_cell=run_cell,
            on_cell=record,
            precomputed=precomputed,
        )

    _write_grid_artifacts(out, cfg, ds, result)
    _write_json(out / "timing.json", {"wall_clock_seconds": time.perf_counter() - started})
    k, p = result.chosen
    print(f"chosen k={k} p={p} val_mse={result.best().val_mse:.6f} -> {out}")
    return 0


def _parallel_grid(cfg: ExperimentConfig, run_cell, precomputed, record, jobs: int):
    """Run whole cells (all seeds) on a thread pool, then select serially.

    Each cell is trained by exactly one worker, so per-cell results match the
    serial path bitwise; the pool only changes wall-clock order.
    """
    pending = [
        (k, p)
        for k in cfg.k_set
        for p in cfg.p_set
        if (k, p) not in precomputed
    ]

    def run_whole_cell(cell):
        k, p = cell
        try:
            runs = tuple(run_cell(k, p, seed) for seed in cfg.seeds)
        except VEForecastError as exc:
            return cell, None, str(exc)
        entry = GridEntry(
            k=k,
            p=p,
            val_mse=float(np.mean([r.val_mse for r in runs])),
            test_mse=float(np.mean([r.test_mse for r in runs])),
            param_count=runs[0].param_count,
            runs=runs,
        )
        return cell, entry, None

    computed = dict(precomputed)
    failures = {}
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        for cell, entry, error in pool.map(run_whole_cell, pending):
            if entry is not None:
                computed[cell] = entry
            else:
                failures[cell] = error
            record(cell[0], cell[1], entry, error)

    def replay(k, p, seed):
        raise NumericError(failures[(k, p)])

    return grid_search(
        None,  # model config unused: every cell is precomputed or replayed
        None,
        None,
        k_set=cfg.k_set,
        p_set=cfg.p_set,
        seeds=cfg.seeds,
        run_cell=replay,
        precomputed=computed,
    )


def _write_grid_artifacts(out: Path, cfg: ExperimentConfig, ds, result) -> None:
    rows = sorted(result.entries.values(), key=lambda e: (e.k, e.p))
    with open(out / "grid.csv", "w") as fh:
        fh.write("k,p,val_mse,test_mse,param_count\n")
        for e in rows:
            fh.write(f"{e.k},{e.p},{e.val_mse:.17g},{e.test_mse:.17g},{e.param_count}\n")
    _write_json(
        out / "grid.json",
        {
            "chosen": {"k": result.chosen[0], "p": result.chosen[1]},
            "entries": [_entry_payload(e) for e in rows],
            "failures": [
                {"k": k, "p": p, "error": msg} for (k, p), msg in sorted(result.failures.items())
            ],
        },
    )
    with open(out / "summary.txt", "w") as fh:
        fh.write(f"{'k':>5} {'p':>6} {'val_mse':>12} {'test_mse':>12} {'params':>10}\n")
        for e in rows:
            star = " *" if (e.k, e.p) == result.chosen else ""
            fh.write(
                f"{e.k:>5} {e.p:>6} {e.val_mse:>12.6f} {e.test_mse:>12.6f} "
                f"{e.param_count:>10}{star}\n"
            )
    k_values = sorted({e.k for e in rows} | {k for k, _ in result.failures})
    p_values = sorted({e.p for e in rows} | {p for _, p in result.failures})
    matrix = np.full((len(k_values), len(p_values)), np.nan)
    for e in rows:
        matrix[k_values.index(e.k), p_values.index(e.p)] = e.val_mse
    grid_heatmap(k_values, p_values, matrix, out / "grid_heatmap.png", chosen=result.chosen)
    write_config(out / "config.toml", cfg)
    write_manifest(out / "manifest.json", _manifest("grid-search", [ds]))


def cmd_prepare_mixed(args) -> int:
    sources = [
        load_csv(resolve_data_path(p), name=n)
        for n, p in (
            ("etth1", args.etth1),
            ("etth2", args.etth2),
            ("ecl", args.ecl),
            ("weather", args.weather),
        )
    ]
    mixed = build_mixed_dataset(*sources)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for tag, ds in (("train", mixed.train), ("val", mixed.val), ("test", mixed.test)):
        write_csv(ds, out / f"mixed_{tag}.csv")
    write_manifest(
        out / "manifest.json",
        _manifest(
            "prepare-mixed",
            sources,
            {
                "blocks": {
                    name: {"start": lo, "stop": hi, "channels": hi - lo}
                    for name, (lo, hi) in mixed.blocks.items()
                },
                "split_rows": {
                    "train": mixed.train.length,
                    "val": mixed.val.length,
                    "test": mixed.test.length,
                },
                "channels": mixed.train.channels,
            },
        ),
    )
    print(f"{mixed.train.channels} channels -> {out}")
    return 0


def _parse_variates(text: str, C: int) -> list[int]:
    if text == "all":
        return list(range(C))
    if "-" in text and "," not in text:
        lo_s, hi_s = text.split("-", 1)
        try:
            lo, hi = int(lo_s), int(hi_s)
        except ValueError:
            raise ConfigError(f"bad variate range {text!r}, expected like 351-355") from None
        if lo > hi:
            raise ConfigError(f"empty variate range {text!r}")
        return list(range(lo, hi + 1))
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError:
        raise ConfigError(f"bad variate list {text!r}, expected like 0,3,7") from None


def cmd_analyze(args) -> int:
    model = load_model(resolve_data_path(args.checkpoint))
    head = model_mixture_head(model)
    channel_names = None
    if args.dataset:
        channel_names = load_csv(resolve_data_path(args.dataset)).channel_names
        if len(channel_names) != head.config.C:
            raise DataError(
                f"dataset has {len(channel_names)} channels but the checkpoint "
                f"expects {head.config.C}"
            )
    variates = _parse_variates(args.variates, head.config.C)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fp = model_fingerprint(model)

    sim_info = export_similarity(out, head, variates, channel_names, fp)
    gate_info = export_gate_weights(out, head, variates, channel_names, fp)
    magnitude_infos = [
        export_weight_magnitude(out, head, v, channel_names, fp) for v in variates
    ]

    labels = sim_info["variates"]
    similarity_heatmap(
        embedding_cosine_similarity(head.embedding[:, variates]),
        labels,
        out / "similarity.png",
    )
    gate_heatmap(gate_weight_table(head.embedding, variates), labels, out / "gates.png")
    for v in variates:
        magnitude_map(
            weighted_weight_magnitude(head, v), out / f"magnitude_v{v}.png"
        )
    write_manifest(
        out / "manifest.json",
        _manifest(
            "analyze",
            [],
            {
                "checkpoint_sha256": fp,
                "exports": [sim_info, gate_info, *magnitude_infos],
            },
        ),
    )
    print(f"{len(variates)} variates analyzed -> {out}")
    return 0


def _csv_ints(text: str) -> tuple:
    return tuple(int(x) for x in text.split(",") if x)


def _csv_floats(text: str) -> tuple:
    return tuple(float(x) for x in text.split(",") if x)


def _add_experiment_flags(sub, with_grid=False):
    sub.add_argument("--config", help="TOML experiment config")
    sub.add_argument("--dataset", help="dataset CSV path (dataset.path)")
    sub.add_argument("--dataset-kind", choices=["ett", "large"], help="split ratio preset")
    sub.add_argument("--backbone", choices=["linear", "dlinear", "fits"])
    sub.add_argument("--kernel", type=int, help="moving-average kernel (dlinear)")
    sub.add_argument("--cutoff", type=int, help="kept frequency bins (fits)")
    sub.add_argument("--revin", action=argparse.BooleanOptionalAction, default=None)
    sub.add_argument("--head", choices=["ci", "vemoe", "vemoe_lora"], help="head variant")
    sub.add_argument("--k", type=int, help="number of experts")
    sub.add_argument("--p", type=float, help="parameter expansion ratio")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--lr", type=float)
    sub.add_argument("--batch", type=int)
    sub.add_argument("--head-lr", type=float, dest="head_lr")
    sub.add_argument("--lookback", type=int)
    sub.add_argument("--horizon", type=int)
    sub.add_argument("--out", help="artifact directory (output.dir)")
    if with_grid:
        sub.add_argument("--k-set", type=_csv_ints, dest="k_set", help="e.g. 2,4,8")
        sub.add_argument("--p-set", type=_csv_floats, dest="p_set", help="e.g. 0.25,1,4")
        sub.add_argument("--seeds", type=_csv_ints, help="e.g. 2021,2022,2023")
        sub.add_argument("--jobs", type=int, default=1, help="parallel cell workers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="veforecast",
        description="Linear forecasting backbones with a gated mixture projection head.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="train one model and save its artifacts")
    _add_experiment_flags(train)
    train.set_defaults(func=cmd_train)

    ev = commands.add_parser("eval", help="score an existing checkpoint on a dataset")
    _add_experiment_flags(ev)
    ev.add_argument("--checkpoint", required=True)
    ev.set_defaults(func=cmd_eval)

    grid = commands.add_parser("grid-search", help="train a (k, p) grid and pick by val MSE")
    _add_experiment_flags(grid, with_grid=True)
    grid.set_defaults(func=cmd_grid)

    mixed = commands.add_parser("prepare-mixed", help="assemble the four-source mixed dataset")
    mixed.add_argument("--etth1", required=True)
    mixed.add_argument("--etth2", required=True)
    mixed.add_argument("--ecl", required=True)
    mixed.add_argument("--weather", required=True)
    mixed.add_argument("--out", default="mixed")
    mixed.set_defaults(func=cmd_prepare_mixed)

    analyze = commands.add_parser("analyze", help="export embedding/gate/weight views")
    analyze.add_argument("--checkpoint", required=True)
    analyze.add_argument("--variates", default="all", help='"all", "351-355" or "0,3,7"')
    analyze.add_argument("--dataset", help="optional CSV for channel labels")
    analyze.add_argument("--out", default="analysis")
    analyze.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except IndexError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except VEForecastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
