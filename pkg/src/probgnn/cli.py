"""Command line entry points.

Every subcommand reads an optional ``--config`` TOML file whose keys are the
subcommand's flag names (dashes or underscores); flags given on the command
line win over the file, which wins over built-in defaults.  Unknown keys are
rejected.  Every run writes ``config.json`` next to its outputs, holding the
fully resolved settings and seed.

Exit codes: 0 success, 1 invalid input (one ``probgnn: error: <Type>: ...``
line on stderr), 2 runtime failure such as a diverged loss.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .data import SyntheticSpec, export_csv, generate, load_directory, make_splits, window_batch
from .distributions import FAMILIES, export_params_csv
from .errors import InvalidSpec, ProbGnnError, RuntimeFailure, UsageError
from .evaluation import DEFAULT_ALPHA, DEFAULT_BINS, bin_probabilities, check_alpha, evaluate_model, shift_report
from .graphs import KINDS, build_adjacency, morans_histogram
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .training import (
    Ensemble,
    TrainSpec,
    build_model,
    grid_search,
    prepare,
    train,
    train_ensemble,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULT_FRACTIONS = (0.6, 0.2, 0.2)
DEFAULT_GRID = {
    "lookback": [2, 4, 6],
    "spatial_layers": [1, 2],
    "width": [64, 128],
    "dropout": [0.2, 0.5],
    "weight_decay": [1e-4, 1e-3, 1e-2, 1e-1],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# option tables: (flag, type, default, help); type None means a boolean switch


def _floats(text):
    try:
        return tuple(float(x) for x in str(text).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}") from None


def _names(text):
    return tuple(x for x in str(text).split(",") if x)


COMMON = [
    ("--seed", int, 0, "root seed for every random stream"),
    ("--out", str, "out", "output directory"),
]
DATA = [
    ("--data", str, "data", "data directory written by `generate` (or matching CSVs)"),
]
SPLIT = [
    ("--fractions", _floats, DEFAULT_FRACTIONS, "train,validation,test shares of the main horizon"),
    ("--kinds", _names, KINDS, "adjacency kinds, comma separated"),
]
MODEL = [
    ("--spatial", str, "GCN", "spatial encoder: GCN or GAT"),
    ("--head", str, "HetG", "distribution head: HomoG, Pois, HetG, TG, Lap, GEns"),
    ("--lookback", int, 2, "recent periods fed to the LSTM"),
    ("--spatial-layers", int, 1, "number of GCN/GAT layers"),
    ("--width", int, 16, "hidden width"),
    ("--lstm-layers", int, 1, "number of LSTM layers"),
    ("--heads", int, 4, "GAT attention heads"),
    ("--dropout", float, 0.0, "dropout rate in the spatial layers"),
    ("--weight-decay", float, 0.0, "decoupled weight decay"),
    ("--activation", str, "relu", "spatial activation: relu, tanh, sigmoid, identity"),
    ("--homog-multiple", float, 0.5, "HomoG scale c as a multiple of the train mean demand"),
    ("--tg-mean", str, "truncated", "TG point prediction: truncated or location"),
    ("--gat-percentile", float, None, "keep GAT neighbours above this weight percentile"),
]
TRAIN = [
    ("--lr", float, 1e-3, "learning rate"),
    ("--epochs", int, 100, "maximum epochs"),
    ("--batch-size", int, 1, "contiguous target steps per batch"),
    ("--patience", int, 10, "early-stopping patience in epochs"),
]
EVAL = [
    ("--alpha", float, DEFAULT_ALPHA, "interval miscoverage; nominal coverage is 1 - alpha"),
    ("--bins", int, DEFAULT_BINS, "number of calibration bin probabilities"),
]
JOBS = [("--jobs", int, 1, "worker processes; results do not depend on this")]
CHECKPOINT = [
    ("--checkpoint", str, None, "model checkpoint (.npz); repeat for an ensemble", "append"),
    ("--window", str, "test", "window to evaluate: train, validation, test or a shift window"),
]

SYNTH = [
    ("--spec", str, None, "synthetic spec TOML (SyntheticSpec keys)"),
    ("--n-stations", int, None, "override n_stations"),
    ("--n-steps", int, None, "override n_steps"),
    ("--noise", str, None, "override noise family"),
    ("--dispersion", float, None, "override poisson dispersion"),
    ("--sigma-intercept", float, None, "override sigma intercept a"),
    ("--sigma-slope", float, None, "override sigma slope b"),
    ("--shift", str, None, "append a shift window NAME=MULTIPLIER (repeatable)", "append"),
]

SUBCOMMANDS = {
    "generate": ("write a seeded synthetic panel", COMMON + SYNTH),
    "build-graph": ("write the adjacency matrices", COMMON + DATA + [SPLIT[1]]),
    "moran": ("Moran's I of every time slice per adjacency", COMMON + DATA + [SPLIT[1]]),
    "train": ("train one model", COMMON + DATA + SPLIT + MODEL + TRAIN + EVAL),
    "grid-search": ("rank a hyperparameter grid by validation NLL",
                    COMMON + DATA + SPLIT + MODEL + TRAIN + JOBS
                    + [("--grid", str, None, "grid TOML: ModelConfig keys mapped to lists")]),
    "ensemble": ("deep ensemble of HetG runs", COMMON + DATA + SPLIT + MODEL + TRAIN + EVAL + JOBS + [
        ("--k", int, 5, "members kept"),
        ("--runs", int, None, "runs trained (default k)"),
        ("--identical-seeds", None, False, "give every run the same seed"),
    ]),
    "evaluate": ("metrics of a checkpoint on a window", COMMON + DATA + CHECKPOINT + EVAL),
    "shift-report": ("metrics table over several windows", COMMON + DATA + EVAL + [
        ("--checkpoint", str, None, "LABEL=PATH or PATH; repeat for several models", "append"),
        ("--windows", _names, None, "windows to report (default: test plus every shift window)"),
    ]),
    "predict": ("write predicted distribution parameters", COMMON + DATA + CHECKPOINT),
}

MODEL_KEYS = {o[0][2:].replace("-", "_") for o in MODEL}
TRAIN_KEYS = {"lr": "lr", "epochs": "max_epochs", "batch_size": "batch_size", "patience": "patience"}


def _dest(flag):
    return flag[2:].replace("-", "_")


def build_parser():
    parser = _Parser(prog="probgnn", description="Probabilistic graph neural networks for demand panels.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name, (help_text, options) in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=None, help="TOML file with defaults for these flags")
        for opt in options:
            flag, typ, default, text = opt[:4]
            action = opt[4] if len(opt) > 4 else None
            shown = f"{text} (default: {default!r})" if default is not None else text
            if typ is None:
                p.add_argument(flag, action="store_const", const=True, default=None, help=shown)
            elif action == "append":
                p.add_argument(flag, type=typ, action="append", default=None, help=shown)
            else:
                p.add_argument(flag, type=typ, default=None, help=shown)
    return parser


def _defaults(command):
    return {_dest(o[0]): o[2] for o in SUBCOMMANDS[command][1]}


def _read_toml(path):
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise InvalidSpec(f"cannot read {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise InvalidSpec(f"{path}: {exc}") from None


def _coerce(command, key, value):
    for opt in SUBCOMMANDS[command][1]:
        if _dest(opt[0]) == key:
            typ = opt[1]
            if typ in (_floats, _names) and isinstance(value, (list, tuple)):
                return tuple(value)
            if typ in (_floats, _names):
                return typ(value)
            if len(opt) > 4 and not isinstance(value, list):
                return [value]
            return value
    return value


def resolve(command, args) -> dict:
    """Merge defaults < config file < command line into one flat settings dict."""
    settings = _defaults(command)
    if args.config is not None:
        raw = _read_toml(args.config)
        flat = {}
        for key, value in raw.items():
            if isinstance(value, dict) and key in ("model", "train", "split", "eval", "synthetic"):
                flat.update(value)
            else:
                flat[key] = value
        for key, value in flat.items():
            dest = key.replace("-", "_")
            if dest not in settings:
                raise InvalidSpec(f"unknown config key {key!r} for {command}")
            settings[dest] = _coerce(command, dest, value)
    for key in settings:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    # fail before any data is read
    if "alpha" in settings:
        check_alpha(settings["alpha"])
    if "bins" in settings:
        bin_probabilities(settings["bins"])
    return settings


# ---------------------------------------------------------------------------
# helpers


def _write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (tuple, set)):
        return list(x)
    raise TypeError(f"not JSON serialisable: {type(x).__name__}")


def _echo(out: Path, command, settings):
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", {"command": command, "settings": settings})


def _canonical(value, choices):
    for c in choices:
        if str(value).lower() == c.lower():
            return c
    return value


def _model_config(settings) -> ModelConfig:
    d = {k: settings[k] for k in MODEL_KEYS} | {"seed": settings["seed"]}
    d["head"] = _canonical(d["head"], FAMILIES)
    d["spatial"] = _canonical(d["spatial"], ("GCN", "GAT"))
    return ModelConfig.from_dict(d)


def _train_spec(settings) -> TrainSpec:
    return TrainSpec.from_dict({v: settings[k] for k, v in TRAIN_KEYS.items()} | {"seed": settings["seed"]})


def _load(settings):
    panel, features, stations, meta = load_directory(settings["data"])
    return panel, features, stations, meta


def _splits(panel, meta, fractions, lookback):
    extra = {k: tuple(v) for k, v in meta.get("shift_windows", {}).items()}
    end = meta.get("main_end", panel.n_steps)
    return make_splits(panel, fractions=fractions, lookback=lookback, extra=extra, end=end)


def _prepared(settings, lookback):
    panel, features, stations, meta = _load(settings)
    adj = build_adjacency(stations, settings["kinds"])
    splits = _splits(panel, meta, settings["fractions"], lookback)
    return panel, features, stations, splits, prepare(panel, features, splits, adj, lookback)


def _split_meta(splits):
    return {"windows": {k: list(v) for k, v in splits.windows().items()}}


def _window_range(meta, name):
    windows = meta.get("windows", {})
    if name not in windows:
        raise InvalidSpec(f"unknown window {name!r}; checkpoint knows {sorted(windows)}")
    return tuple(windows[name])


def _load_predictor(paths):
    if not paths:
        raise InvalidSpec("--checkpoint is required")
    loaded = [load_checkpoint(p) for p in paths]
    models = [m for m, _ in loaded]
    meta = loaded[0][1]
    if len(models) == 1:
        return models[0], meta
    return Ensemble(models), meta


def _batch(predictor, panel, features, meta, window):
    member = predictor.models[0] if isinstance(predictor, Ensemble) else predictor
    return window_batch(panel, features, member.norm_stats, _window_range(meta, window),
                        member.config.lookback)


def _write_metrics(out, report, prefix="metrics"):
    report.to_json(out / f"{prefix}.json")
    with open(out / f"{prefix}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in report.metrics().items():
            w.writerow([k, repr(float(v))])
        w.writerow(["coverage", repr(float(report.coverage))])
        w.writerow(["n_obs", report.n_obs])
    report.qq_to_csv(out / f"{prefix}_qq.csv")


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(settings, out):
    spec_dict = {}
    if settings["spec"] is not None:
        raw = _read_toml(settings["spec"])
        spec_dict.update(raw.get("synthetic", raw))
    for key in ("n_stations", "n_steps", "noise", "dispersion", "sigma_intercept", "sigma_slope"):
        if settings[key] is not None:
            spec_dict[key] = settings[key]
    shifts = list(spec_dict.get("shift_windows", []))
    for item in settings["shift"] or []:
        name, sep, mult = item.partition("=")
        if not sep:
            raise InvalidSpec(f"--shift expects NAME=MULTIPLIER, got {item!r}")
        try:
            shifts.append((name, float(mult)))
        except ValueError:
            raise InvalidSpec(f"--shift multiplier must be a number, got {mult!r}") from None
    spec_dict["shift_windows"] = shifts
    spec_dict["seed"] = settings["seed"]
    spec = SyntheticSpec.from_dict(spec_dict)
    syn = generate(spec)
    meta = {"spec": spec.to_dict(), "main_end": syn.main_end,
            "shift_windows": {k: list(v) for k, v in syn.windows.items()}}
    export_csv(out, syn.demand, syn.features, syn.stations, meta)
    export_params_csv(syn.truth, out / "truth_params.csv", syn.demand.station_ids, list(syn.demand.timestamps))
    return {"steps": syn.demand.n_steps, "stations": syn.demand.n_stations}


def cmd_build_graph(settings, out):
    _, _, stations, _ = _load(settings)
    adj = build_adjacency(stations, settings["kinds"])
    adj.export_csv(out)
    return {"graphs": list(adj.names)}


def cmd_moran(settings, out):
    panel, _, stations, _ = _load(settings)
    adj = build_adjacency(stations, settings["kinds"])
    series = morans_histogram(panel, adj)
    with open(out / "moran_summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["graph", "mean_i", "n_slices", "skipped"])
        for name, s in series.items():
            w.writerow([name, repr(s.mean), s.values.size, s.skipped])
    with open(out / "moran_series.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["graph", "timestamp_index", "morans_i"])
        for name, s in series.items():
            for t, v in zip(s.times, s.values):
                w.writerow([name, int(panel.timestamps[t]), repr(float(v))])
    return {name: s.mean for name, s in series.items()}


def cmd_train(settings, out):
    config = _model_config(settings)
    panel, features, _, splits, data = _prepared(settings, config.lookback)
    model = build_model(config, data)
    report = train(model, data, _train_spec(settings))
    report.to_csv(out / "train_report.csv")
    report.to_json(out / "train_summary.json")
    save_checkpoint(model, out / "checkpoint.npz", _split_meta(splits))
    metrics = evaluate_model(model, data.validation, settings["alpha"], settings["bins"], settings["seed"])
    _write_metrics(out, metrics, "validation_metrics")
    return {"best_epoch": report.best_epoch, "best_val_nll": report.best_val_nll}


def _grid_entries(settings):
    grid = dict(DEFAULT_GRID)
    if settings["grid"] is not None:
        raw = _read_toml(settings["grid"])
        grid = raw.get("grid", raw)
    unknown = set(grid) - MODEL_KEYS
    if unknown:
        raise InvalidSpec(f"unknown grid keys: {sorted(unknown)}")
    base = {k: settings[k] for k in MODEL_KEYS}
    combos = [{}]
    for key in sorted(grid):
        values = grid[key] if isinstance(grid[key], list) else [grid[key]]
        combos = [c | {key: v} for c in combos for v in values]
    return [_model_config(settings | base | c) for c in combos]


def cmd_grid_search(settings, out):
    configs = _grid_entries(settings)
    spec = _train_spec(settings)
    by_lookback = {}
    for i, cfg in enumerate(configs):
        by_lookback.setdefault(cfg.lookback, []).append(i)
    # windows are cut for the longest lookback so every trial scores the same targets;
    # seeds still derive from the position in the full grid
    panel, features, stations, meta = _load(settings)
    adj = build_adjacency(stations, settings["kinds"])
    splits = _splits(panel, meta, settings["fractions"], max(by_lookback))
    results = []
    for lookback, idx in sorted(by_lookback.items()):
        data = prepare(panel, features, splits, adj, lookback)
        ranked = grid_search([configs[i] for i in idx], data, spec, jobs=settings["jobs"],
                             root_seed=settings["seed"], indices=idx)
        results += [(r, data, splits) for r in ranked]
    results.sort(key=lambda x: (x[0].val_nll, x[0].index))
    keys = sorted(MODEL_KEYS)
    with open(out / "grid_results.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "trial"] + keys + ["val_nll", "best_epoch", "error"])
        for rank, (r, _, _) in enumerate(results, start=1):
            cfg = r.config.to_dict()
            w.writerow([rank, r.index] + [cfg[k] for k in keys]
                       + [repr(float(r.val_nll)), r.report.best_epoch if r.report else "", r.error or ""])
    best, data, splits = results[0]
    if best.error is None:
        save_checkpoint(best.restore(data), out / "best_checkpoint.npz", _split_meta(splits))
    return {"trials": len(results), "best_val_nll": best.val_nll}


def cmd_ensemble(settings, out):
    config = _model_config(settings)
    _, _, _, splits, data = _prepared(settings, config.lookback)
    res = train_ensemble(config, settings["k"], data, _train_spec(settings), n_runs=settings["runs"],
                         jobs=settings["jobs"], root_seed=settings["seed"],
                         identical_seeds=bool(settings["identical_seeds"]))
    members_dir = out / "members"
    members_dir.mkdir(exist_ok=True)
    with open(out / "ensemble_runs.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "seed", "val_nll", "kept", "error"])
        kept = {r.index for r in res.members}
        for r in sorted(res.runs, key=lambda r: r.index):
            w.writerow([r.index, r.config.seed, repr(float(r.val_nll)), int(r.index in kept), r.error or ""])
    for rank, (member, model) in enumerate(zip(res.members, res.ensemble.models)):
        save_checkpoint(model, members_dir / f"member_{rank}.npz", _split_meta(splits) | {"run": member.index})
    test = data.batches["test"]
    report = evaluate_model(res.ensemble, test, settings["alpha"], settings["bins"], settings["seed"])
    _write_metrics(out, report, "test_metrics")
    with open(out / "members_test_metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["member", "run"] + list(report.metrics()))
        for rank, (member, model) in enumerate(zip(res.members, res.ensemble.models)):
            rep = evaluate_model(model, test, settings["alpha"], settings["bins"], settings["seed"])
            w.writerow([rank, member.index] + [repr(float(v)) for v in rep.metrics().values()])
    return {"k": len(res.members), "test_nll": report.nll}


def cmd_evaluate(settings, out):
    panel, features, _, _ = _load(settings)
    predictor, meta = _load_predictor(settings["checkpoint"])
    batch = _batch(predictor, panel, features, meta, settings["window"])
    report = evaluate_model(predictor, batch, settings["alpha"], settings["bins"], settings["seed"])
    _write_metrics(out, report)
    return {"nll": report.nll, "picp": report.picp}


def cmd_shift_report(settings, out):
    panel, features, _, _ = _load(settings)
    if not settings["checkpoint"]:
        raise InvalidSpec("--checkpoint is required")
    models, meta = [], None
    for item in settings["checkpoint"]:
        label, sep, path = item.partition("=")
        if not sep:
            label, path = Path(item).stem, item
        model, m = load_checkpoint(path)
        meta = meta or m
        models.append((label, model))
    names = settings["windows"]
    if names is None:
        names = ["test"] + [k for k in meta["windows"] if k not in ("train", "validation", "test")]
    windows = {}
    for name in names:
        windows[name] = _batch(models[0][1], panel, features, meta, name)
    for label, model in models[1:]:
        if model.config.lookback != models[0][1].config.lookback:
            raise InvalidSpec("shift-report needs models with a common lookback")
    table = shift_report(models, windows, settings["alpha"], settings["bins"], settings["seed"])
    table.to_csv(out / "shift_report.csv")
    return {"rows": len(table.rows)}


def cmd_predict(settings, out):
    panel, features, _, _ = _load(settings)
    predictor, meta = _load_predictor(settings["checkpoint"])
    batch = _batch(predictor, panel, features, meta, settings["window"])
    params = predictor.predict(batch)
    export_params_csv(params, out / "predictions.csv", panel.station_ids,
                      [int(panel.timestamps[i]) for i in batch.index])
    return {"cells": int(params.loc.size)}


COMMANDS = {
    "generate": cmd_generate,
    "build-graph": cmd_build_graph,
    "moran": cmd_moran,
    "train": cmd_train,
    "grid-search": cmd_grid_search,
    "ensemble": cmd_ensemble,
    "evaluate": cmd_evaluate,
    "shift-report": cmd_shift_report,
    "predict": cmd_predict,
}


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        try:
            args = build_parser().parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        settings = resolve(args.command, args)
        out = Path(settings["out"])
        _echo(out, args.command, settings)
        summary = COMMANDS[args.command](settings, out)
    except ProbGnnError as exc:
        msg = " ".join(str(exc).split())
        print(f"probgnn: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    except RuntimeFailure as exc:
        print(f"probgnn: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary, sort_keys=True, default=_jsonable))
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
