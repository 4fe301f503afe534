"""Command-line interface: ``unite <command> [--config FILE] [flags]``.

Commands: gen-data, train, evaluate, estimate, robustness, sweep. A config
file holds ``key = value`` lines (``#`` starts a comment); keys are flag names
with or without leading dashes, and flags given on the command line win.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .conjugate import NonFinite
from .estimators import AggConfig, make_estimator
from .evaluation import (
    CONTEXT_GRID,
    DATA_FRACTIONS,
    DEFAULT_BUCKET_EDGES,
    DELTA_GRID_MINUTES,
    NonpositiveSpeed,
    SweepCell,
    data_efficiency_sweep,
    evaluate,
    point_travel_time,
    robustness_curve,
    write_curve_csv,
    write_sweep_csv,
)
from .network import DAY_SECONDS, DataError, check_tow, parse_network, parse_trajectories
from .neural import MIN_PROPAGATION_SPEED, ModelParams
from .records import RecordStore, SelectionParams
from .synth import InfeasibleSpec, SynthSpec, generate
from .training import TrainConfig, train

log = logging.getLogger("unite")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ALGORITHMS = ("agg", "gru", "unite-dis", "unite-gen")
STORE_C_MAX = 4

# record selection used when --c / --delta are not given (delta in minutes)
DEFAULT_SELECTION = {"agg": (0, 120.0), "unite-dis": (1, 120.0), "unite-gen": (4, 15.0)}
DEFAULT_K = 1
_DAYS = ("mon", "tue", "wed", "thu", "fri", "sat", "sun")


class UsageError(Exception):
    pass


# --- argument parsing --------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file with defaults for any flag")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def _data(p: argparse.ArgumentParser, *splits: str) -> None:
    p.add_argument("--network", required=False, help="network CSV")
    for s in splits:
        p.add_argument(f"--{s}", help=f"{s} trajectory CSV")
    p.add_argument("--store", help="record store snapshot; built from --train and saved here when missing")


def _algorithm(p: argparse.ArgumentParser, choices=ALGORITHMS) -> None:
    p.add_argument("--algorithm", choices=choices, required=False, help="estimator")
    p.add_argument("--model", help="model checkpoint (.npz) for gru / unite-dis / unite-gen")
    p.add_argument("--k", type=int, help="AGG record threshold (agg only; default 1)")
    p.add_argument("--c", type=int, help="context width for record selection")
    p.add_argument("--delta", type=float, help="time window width in minutes")


def _training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, default=0.001, help="ADAM learning rate (default: 0.001)")
    p.add_argument("--epochs", type=int, default=10, help="training epochs (default: 10)")
    p.add_argument("--batch-size", type=int, default=128, help="trajectories per batch (default: 128)")
    p.add_argument("--a", type=float, default=1.0, help="ELU scale and kappa offset (default: 1)")
    p.add_argument("--epsilon", type=float, default=1e-6, help="positivity margin (default: 1e-6)")
    p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="unite", description="Travel speed estimation with a learned prior.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    subs = {}

    p = sub.add_parser("gen-data", help="generate a synthetic network and trajectories")
    _common(p)
    p.add_argument("--n-segments", type=int, default=200)
    p.add_argument("--n-trajectories", type=int, default=2000)
    p.add_argument("--route-min", type=int, default=10, help="shortest route, in segments")
    p.add_argument("--route-max", type=int, default=40, help="longest route, in segments")
    p.add_argument("--missingness", type=float, default=0.0, help="probability a traversal is unobserved")
    subs["gen-data"] = p

    p = sub.add_parser("train", help="train a GRU or UniTE-DIS model")
    _common(p)
    _data(p, "train", "val")
    _algorithm(p, ("gru", "unite-dis"))
    _training(p)
    subs["train"] = p

    p = sub.add_parser("evaluate", help="NLL, MAE and MAPE on a trajectory set")
    _common(p)
    _data(p, "train", "test")
    _algorithm(p)
    subs["evaluate"] = p

    p = sub.add_parser("estimate", help="per-segment predictives and travel time for one route")
    _common(p)
    _data(p, "train")
    _algorithm(p)
    p.add_argument("--route", help="comma-separated segment ids")
    p.add_argument("--departure", help="seconds of week, or 'DAY HH:MM' such as 'tue 08:15'")
    subs["estimate"] = p

    p = sub.add_parser("robustness", help="mean sNLL by number of available records")
    _common(p)
    _data(p, "train", "test")
    _algorithm(p)
    p.add_argument("--bucket-delta", type=float, default=120.0, help="window for counting records, minutes")
    p.add_argument("--exact-buckets", action="store_true", help="one bucket per record count")
    subs["robustness"] = p

    p = sub.add_parser("sweep", help="data-efficiency or record-selection sweep")
    _common(p)
    _data(p, "train", "val", "test")
    _algorithm(p)
    _training(p)
    p.add_argument("--kind", choices=("data_efficiency", "record_selection"), required=False)
    p.add_argument("--fractions", default=",".join(map(str, DATA_FRACTIONS)))
    p.add_argument("--contexts", default=",".join(map(str, CONTEXT_GRID)))
    p.add_argument("--deltas", default=",".join(map(str, DELTA_GRID_MINUTES)), help="minutes")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes for record_selection")
    subs["sweep"] = p
    return parser, subs


def read_config(path: str) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.lstrip("-").replace("-", "_")] = value
    return out


def _apply_config(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, value in values.items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"unknown config key {key!r} for this command")
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key!r} expects a boolean")
            defaults[key] = value.lower() in ("true", "1", "yes")
        else:
            try:
                defaults[key] = action.type(value) if action.type else value
            except ValueError:
                raise UsageError(f"config key {key!r}: bad value {value!r}") from None
            if action.choices and defaults[key] not in action.choices:
                raise UsageError(f"config key {key!r} must be one of {list(action.choices)}")
    sub.set_defaults(**defaults)


def parse_args(argv=None) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        raise SystemExit(EXIT_USAGE)
    if args.config:
        _apply_config(subs[args.command], read_config(args.config))
        args = parser.parse_args(argv)
    return args


# --- helpers -----------------------------------------------------------------


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required for {args.command}")


def _selection_for(args) -> tuple[int | None, SelectionParams | None]:
    """Validate algorithm-specific fields and fill in defaults; returns (k, selection)."""
    alg = args.algorithm
    if args.k is not None and alg != "agg":
        raise UsageError("--k applies to the agg algorithm only")
    if alg == "agg" and getattr(args, "model", None):
        raise UsageError("agg does not use a model checkpoint")
    if alg == "gru":
        if args.c is not None or args.delta is not None:
            raise UsageError("gru uses no records; drop --c and --delta")
        return None, None
    c0, d0 = DEFAULT_SELECTION[alg]
    c = c0 if args.c is None else args.c
    delta = d0 if args.delta is None else args.delta
    if c > STORE_C_MAX:
        raise UsageError(f"--c must be at most {STORE_C_MAX}")
    sel = SelectionParams(c, delta * 60.0)
    return (DEFAULT_K if args.k is None else args.k) if alg == "agg" else None, sel


def _load_store(args) -> RecordStore:
    if args.store and Path(args.store).exists():
        return RecordStore.load(args.store)
    if not getattr(args, "train", None):
        raise UsageError("a record store needs --store (existing snapshot) or --train")
    store = RecordStore.build(parse_trajectories(args.train, _network(args)), c_max=STORE_C_MAX)
    if args.store:
        store.save(args.store)
    return store


_NETWORK_CACHE: dict[str, object] = {}


def _network(args):
    _require(args, "network")
    if args.network not in _NETWORK_CACHE:
        _NETWORK_CACHE[args.network] = parse_network(args.network)
    return _NETWORK_CACHE[args.network]


def _estimator(args, store_needed=True):
    k, sel = _selection_for(args)
    network = _network(args)
    params = None
    if args.algorithm != "agg":
        _require(args, "model")
        params = ModelParams.load(args.model)
    store = _load_store(args) if args.algorithm != "gru" and store_needed else None
    agg = AggConfig(k, sel) if args.algorithm == "agg" else None
    return make_estimator(args.algorithm, network, store, params, agg, sel), store


def _write_manifest(args, out: Path, extra: dict | None = None) -> None:
    config = {k: v for k, v in vars(args).items() if k not in ("func",)}
    manifest = {
        "command": args.command,
        "config": config,
        "seed": args.seed,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def parse_departure(text: str) -> float:
    text = text.strip()
    try:
        return check_tow(float(text))
    except ValueError:
        pass
    parts = text.lower().split()
    if len(parts) != 2 or parts[0][:3] not in _DAYS or ":" not in parts[1]:
        raise UsageError(f"bad departure {text!r}; use seconds of week or 'DAY HH:MM'")
    hh, mm = parts[1].split(":", 1)
    try:
        h, m = int(hh), int(mm)
    except ValueError:
        raise UsageError(f"bad departure time {parts[1]!r}") from None
    if not (0 <= h < 24 and 0 <= m < 60):
        raise UsageError(f"bad departure time {parts[1]!r}")
    return _DAYS.index(parts[0][:3]) * DAY_SECONDS + h * 3600.0 + m * 60.0


# --- commands ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = SynthSpec(
        n_segments=args.n_segments,
        n_trajectories=args.n_trajectories,
        route_length=(args.route_min, args.route_max),
        missingness=args.missingness,
        seed=args.seed,
    )
    out = _outdir(args)
    data = generate(spec)
    data.write(out)
    _write_manifest(args, out, {"generator": asdict(spec)})
    print(f"wrote {len(data.network)} segments and {len(data.train)}/{len(data.val)}/{len(data.test)} "
          f"train/val/test trajectories to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args, "algorithm", "train")
    _, sel = _selection_for(args)
    network = _network(args)
    train_set = parse_trajectories(args.train, network)
    val_set = parse_trajectories(args.val, network) if args.val else None
    cfg = TrainConfig(
        objective=args.algorithm,
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        a=args.a,
        epsilon=args.epsilon,
        selection=sel or SelectionParams(),
        max_steps=args.max_steps,
    )
    store = None
    if args.algorithm == "unite-dis":
        store = _load_store(args)
    result = train(network, train_set, cfg, val_set, store)
    out = _outdir(args)
    model_path = Path(args.model) if args.model else out / "model.npz"
    result.params.save(model_path)
    with open(out / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "steps", "train_nll", "val_nll"])
        for h in result.history:
            w.writerow([h.epoch, h.steps, repr(h.train_nll), "" if h.val_nll is None else repr(h.val_nll)])
    _write_manifest(args, out, {"model": str(model_path), "best_epoch": result.best_epoch})
    last = result.history[-1]
    print(f"trained {args.algorithm} for {last.steps} steps; best epoch {result.best_epoch}; model at {model_path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _require(args, "algorithm")
    _selection_for(args)
    _require(args, "test")
    est, _ = _estimator(args)
    test = parse_trajectories(args.test, _network(args))
    report = evaluate(est, _network(args), test)
    out = _outdir(args)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    _write_manifest(args, out)
    print(report.summary())
    return EXIT_OK


def cmd_estimate(args) -> int:
    _require(args, "algorithm", "route", "departure")
    network = _network(args)
    route = [s.strip() for s in args.route.split(",") if s.strip()]
    try:
        network.validate_route(route)
    except DataError as exc:
        raise UsageError(f"--route: {exc}") from None
    tau = parse_departure(args.departure)
    est, _ = _estimator(args)
    result = est.estimate_route(route, [tau] + [None] * (len(route) - 1))
    names = ("nu", "loc", "scale") if result.kind == "studentt" else ("mu", "sigma")
    speeds = np.maximum(result.expected, MIN_PROPAGATION_SPEED)
    total = point_travel_time([network[s].length for s in route], speeds)
    rows = []
    for i, sid in enumerate(route):
        row = {"segment": sid, "arrival_tow_s": float(result.arrivals[i]), "records": int(result.n_records[i])}
        row.update({n: float(v) for n, v in zip(names, result.params[i])})
        row["expected_speed_mps"] = float(result.expected[i])
        rows.append(row)
        print(f"{sid}\t" + "\t".join(f"{n}={row[n]:.6g}" for n in names) + f"\trecords={row['records']}")
    print(f"travel time {total:.2f} s")
    out = _outdir(args)
    (out / "estimate.json").write_text(
        json.dumps({"distribution": result.kind, "segments": rows, "travel_time_s": total}, indent=2) + "\n"
    )
    _write_manifest(args, out)
    return EXIT_OK


def cmd_robustness(args) -> int:
    _require(args, "algorithm")
    _selection_for(args)
    _require(args, "test")
    est, store = _estimator(args)
    if store is None:
        store = _load_store(args)
    test = parse_trajectories(args.test, _network(args))
    edges = None if args.exact_buckets else DEFAULT_BUCKET_EDGES
    buckets = robustness_curve(est, _network(args), test, store, args.bucket_delta * 60.0, edges)
    out = _outdir(args)
    write_curve_csv(buckets, out / "robustness.csv")
    _write_manifest(args, out)
    for b in buckets:
        print(f"{b.label:>10}  n={b.n:<7d} mean sNLL {b.mean_snll:.4f}")
    return EXIT_OK


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad number list {text!r}") from None


def _selection_cell(job):
    """Worker for one record-selection cell; re-reads inputs so it can run in a subprocess."""
    argv, c, delta = job
    args = parse_args(argv)
    args.c, args.delta = c, delta
    est, _ = _estimator(args)
    val = parse_trajectories(args.val, _network(args))
    return evaluate(est, _network(args), val).nll


def cmd_sweep(args, argv) -> int:
    _require(args, "algorithm", "kind")
    out = _outdir(args)
    if args.kind == "data_efficiency":
        if args.algorithm not in ("gru", "unite-dis"):
            raise UsageError("data_efficiency sweeps train gru or unite-dis")
        _require(args, "train", "val", "test")
        _, sel = _selection_for(args)
        network = _network(args)
        cfg = TrainConfig(
            objective=args.algorithm,
            lr=args.lr,
            epochs=args.epochs,
            batch_size=args.batch_size,
            seed=args.seed,
            a=args.a,
            epsilon=args.epsilon,
            selection=sel or SelectionParams(),
        )
        cells = data_efficiency_sweep(
            network,
            parse_trajectories(args.train, network),
            parse_trajectories(args.val, network),
            parse_trajectories(args.test, network),
            cfg,
            _floats(args.fractions),
        )
        write_sweep_csv(cells, ["fraction"], out / "sweep.csv")
    else:
        if args.algorithm == "gru":
            raise UsageError("gru selects no records; record_selection needs agg, unite-dis or unite-gen")
        if args.c is not None or args.delta is not None:
            raise UsageError("record_selection sweeps take --contexts / --deltas, not --c / --delta")
        _require(args, "val")
        _selection_for(args)
        grid = [(int(c), d) for c in _floats(args.contexts) for d in _floats(args.deltas)]
        jobs = [(argv, c, d) for c, d in grid]
        if args.jobs > 1:
            with ProcessPoolExecutor(args.jobs) as pool:
                values = list(pool.map(_selection_cell, jobs))
        else:
            values = [_selection_cell(j) for j in jobs]
        cells = [SweepCell(key, v) for key, v in zip(grid, values)]
        write_sweep_csv(cells, ["c", "delta_min"], out / "sweep.csv")
    _write_manifest(args, out)
    for cell in cells:
        print(" ".join(str(k) for k in cell.key), f"{cell.value:.4f}")
    return EXIT_OK


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        commands = {
            "gen-data": cmd_gen_data,
            "train": cmd_train,
            "evaluate": cmd_evaluate,
            "estimate": cmd_estimate,
            "robustness": cmd_robustness,
        }
        if args.command == "sweep":
            return cmd_sweep(args, argv)
        return commands[args.command](args)
    except (UsageError, InfeasibleSpec) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_DATA
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFinite, NonpositiveSpeed, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
