"""Command-line front end: ``floodcast <subcommand> [options]``.

Every subcommand accepts ``--config FILE`` (a JSON object whose keys supply
defaults for that subcommand's options; explicit flags still win) and
``--seed``, and prints a run fingerprint derived from the resolved options.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluation import BucketReport, BucketSpec, BucketStats, evaluate_event, render_report
from .experiment import (
    BUILTIN,
    DatasetConfig,
    ExperimentConfig,
    ExperimentError,
    builtin_config,
    fingerprint,
    run_experiment,
)
from .features import Dataset, FeatureSpec, sample_patches, write_samples
from .models import FAMILIES, ModelSpec, build_model
from .rainfall import catalogue
from .sim import SimConfig, run_dataset, synthetic_dem
from .training import METHODS, TrainConfig, load_model, native_spec, save_model, train, write_history

log = logging.getLogger("floodcast")

# options that never change results and stay out of fingerprints
_VOLATILE = {"command", "func", "config", "verbose", "parallel_models"}


def _fingerprint(args: argparse.Namespace) -> str:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in _VOLATILE}
    return fingerprint({"command": args.command, **{k: _jsonable(v) for k, v in resolved.items()}})


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def _events(text: str | Sequence[str] | None) -> list[str] | None:
    if text is None:
        return None
    if isinstance(text, str):
        return [e for e in text.replace(",", " ").split() if e]
    return list(text)


def _widths(text: str | Sequence[int] | None) -> tuple[int, ...]:
    if not text:
        return ()
    if isinstance(text, str):
        return tuple(int(w) for w in text.split(","))
    return tuple(int(w) for w in text)


# --------------------------------------------------------------------------- #
# Subcommands
# --------------------------------------------------------------------------- #

def cmd_simulate(args: argparse.Namespace) -> int:
    kind = DatasetConfig(dem=args.dem).catchment
    dem, mask = synthetic_dem(kind, args.size)
    cfg = SimConfig(roughness_coefficient=args.roughness, boundary=args.boundary,
                    inner_steps_per_frame=args.inner_steps)
    events = catalogue(args.events, args.seed)
    wanted = _events(args.event)
    if wanted:
        unknown = sorted(set(wanted) - {e.name for e in events})
        if unknown:
            raise ExperimentError(f"events {unknown} are not in the {args.events}")
        events = [e for e in events if e.name in wanted]
    manifest = run_dataset(dem, mask, events, cfg, args.out)
    print(f"simulated {len(manifest['events'])} events into {args.out}")
    return 0


def cmd_prepare(args: argparse.Namespace) -> int:
    ds = Dataset.load(args.data, _events(args.events))
    spec = FeatureSpec(T=args.T, H=args.H, patch_size=args.patch_size)
    samples = sample_patches(ds, sorted(ds.events), spec, args.n, seed=args.seed, wet_bias=args.wet_bias)
    path = write_samples(samples, args.out)
    print(f"wrote {len(samples)} samples, index {path}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    ds = Dataset.load(args.data)
    train_events = _events(args.train_events) or sorted(set(ds.events) - set(_events(args.val_events) or ()))
    spec = ModelSpec(args.model, T=args.T, H=args.H, widths=_widths(args.widths), seed=args.seed)
    overrides = dict(method=args.method, seed=args.seed, patch_size=args.patch_size,
                     patches_per_epoch=args.patches_per_epoch, batch_size=args.batch_size)
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.lr is not None:
        overrides["learning_rate"] = args.lr
    cfg = TrainConfig.for_family(args.model, **overrides)
    result = train(spec, ds, cfg, train_events, _events(args.val_events) or ())
    out = Path(args.out)
    save_model(result.model, out / "checkpoint", cfg, result.adam)
    write_history(result.history, out / "history.csv")
    print(f"trained {args.model} ({args.method}); best epoch {result.best_epoch}; checkpoint {out / 'checkpoint'}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    if args.checkpoint:
        model = load_model(args.checkpoint)  # one-step networks are rolled out to --horizon
    elif args.model in ("no_change", "linear_extrap"):
        model = build_model(native_spec(ModelSpec(args.model, T=args.T, H=args.horizon), "one_ts"))
    else:
        raise ExperimentError("eval needs --checkpoint, or --model no_change|linear_extrap")
    ds = Dataset.load(args.data, _events(args.events))
    name = args.name or (model.spec.label if args.checkpoint else args.model)
    patch = args.patch_size or max(ds.dem.shape)
    reports = [evaluate_event(model, ds, e, args.horizon, patch, name=name) for e in sorted(ds.events)]
    csv_path, svg_path = render_report(reports, args.out, "report", title=name)
    print(f"report {csv_path} and {svg_path}")
    return 0


def _reports_from_csv(csv_path: Path) -> list[BucketReport]:
    """Rebuild reports, including raw values, from a report CSV and its spills."""
    rows = list(csv.DictReader(csv_path.open()))
    grouped: dict[tuple[str, str], list[dict]] = {}
    for row in rows:
        grouped.setdefault((row["model"], row["event"]), []).append(row)
    spec = BucketSpec()
    out = []
    for (model, event), group in grouped.items():
        stats, values = [], {}
        for row in group:
            b = int(row["bucket"])
            vals = np.load(csv_path.parent / row["spill"]) if row["spill"] else None
            if vals is not None:
                values[b] = vals
            sigma = float(row["sigma"]) if row["sigma"] else None
            stats.append(BucketStats.from_values(b, spec.label(b), vals, int(row["count"]), sigma))
        out.append(BucketReport(model, event, stats, values))
    return out


def cmd_report(args: argparse.Namespace) -> int:
    reports = []
    for d in args.inputs:
        path = Path(d)
        reports.extend(_reports_from_csv(path if path.suffix == ".csv" else path / "report.csv"))
    csv_path, svg_path = render_report(reports, args.out, args.name, title=args.name)
    print(f"report {csv_path} and {svg_path}")
    return 0


def cmd_experiment(args: argparse.Namespace) -> int:
    if args.experiment_config:
        cfg = ExperimentConfig.load(args.experiment_config).with_seed(args.seed)
    else:
        cfg = builtin_config(args.name, args.seed)
    exp_dir = run_experiment(cfg, args.results, args.parallel_models)
    summary = json.loads((exp_dir / "summary.json").read_text())
    labels = summary["bucket_labels"]
    print(f"{'model':28s} " + " ".join(f"{lab:>10s}" for lab in labels))
    for name, entry in summary["models"].items():
        cells = " ".join(f"{m:10.3f}" if m is not None else f"{'-':>10s}" for m in entry["median_m"])
        print(f"{name:28s} {cells}")
    print(f"results in {exp_dir}")
    return 0


# --------------------------------------------------------------------------- #
# Parser
# --------------------------------------------------------------------------- #

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="floodcast", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON file supplying option defaults")
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)
        return p

    p = add("simulate", cmd_simulate, "simulate a rainfall catalogue on a synthetic DEM")
    p.add_argument("--dem", default="synthetic-709", choices=["synthetic-709", "synthetic-744"])
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--events", default="short-catalogue",
                   choices=["short-catalogue", "long-catalogue", "full-catalogue"])
    p.add_argument("--event", help="comma-separated subset of the catalogue to simulate")
    p.add_argument("--roughness", type=float, default=SimConfig.roughness_coefficient)
    p.add_argument("--boundary", default="closed", choices=["closed", "open"])
    p.add_argument("--inner-steps", type=int, default=SimConfig.inner_steps_per_frame)
    p.add_argument("--out", default="data")

    p = add("prepare", cmd_prepare, "cut and cache training patches")
    p.add_argument("--data", required=True)
    p.add_argument("--events", help="comma-separated event names (default: all)")
    p.add_argument("--T", "--t", dest="T", type=int, default=5)
    p.add_argument("--H", "--horizon", dest="H", type=int, default=12)
    p.add_argument("--patch-size", "--patch", dest="patch_size", type=int, default=128)
    p.add_argument("--n", "--n-patches", dest="n", type=int, default=512)
    p.add_argument("--wet-bias", type=float, default=0.5)
    p.add_argument("--out", default="samples")

    p = add("train", cmd_train, "train one model")
    p.add_argument("--model", required=True, choices=FAMILIES)
    p.add_argument("--method", default="direct_12ts", choices=METHODS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--data", required=True)
    p.add_argument("--train-events")
    p.add_argument("--val-events")
    p.add_argument("--T", type=int, default=5)
    p.add_argument("--H", type=int, default=12)
    p.add_argument("--widths", help="comma-separated channel widths")
    p.add_argument("--patch-size", type=int, default=TrainConfig.patch_size)
    p.add_argument("--patches-per-epoch", type=int, default=TrainConfig.patches_per_epoch)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--out", default="run")

    p = add("eval", cmd_eval, "score a checkpoint or baseline on simulated events")
    p.add_argument("--checkpoint")
    p.add_argument("--model", choices=["no_change", "linear_extrap"])
    p.add_argument("--data", required=True)
    p.add_argument("--events")
    p.add_argument("--T", type=int, default=5)
    p.add_argument("--horizon", type=int, default=12)
    p.add_argument("--patch-size", type=int, help="tile size (default: whole raster)")
    p.add_argument("--name")
    p.add_argument("--out", default="eval")

    p = add("report", cmd_report, "merge report CSVs into one CSV and SVG")
    p.add_argument("inputs", nargs="+", help="eval output directories or report CSV files")
    p.add_argument("--name", default="report")
    p.add_argument("--out", default="report")

    p = add("experiment", cmd_experiment, "run a full experiment protocol")
    p.add_argument("--name", default="short-events", choices=sorted(BUILTIN))
    p.add_argument("--experiment-config", help="JSON ExperimentConfig (overrides --name)")
    p.add_argument("--results", help="results root (default: $FLOODBENCH_RESULTS or ./results)")
    p.add_argument("--parallel-models", type=int, default=1)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    defaults = json.loads(Path(args.config).read_text())
    if not isinstance(defaults, dict):
        raise SystemExit(f"{args.config}: expected a JSON object")
    subparser = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    known = {a.dest for a in subparser._actions}  # noqa: SLF001
    unknown = sorted(set(k.replace("-", "_") for k in defaults) - known)
    if unknown:
        raise SystemExit(f"{args.config}: unknown options for {args.command}: {unknown}")
    subparser.set_defaults(**{k.replace("-", "_"): v for k, v in defaults.items()})
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = _apply_config(parser, argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    print(f"fingerprint: {_fingerprint(args)}")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"floodcast {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
