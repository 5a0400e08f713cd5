"""Declarative experiment configs and the end-to-end pipeline runner.

An experiment simulates (or reuses) a dataset, trains every configured
model, evaluates it on the test events and writes::

    <results>/<experiment>/config.json
    <results>/<experiment>/<model>/{checkpoint/, history.csv, report.csv, report.svg, spill/}
    <results>/<experiment>/{report.csv, report.svg, spill/, summary.json}

Everything except wall-clock timing is a pure function of the config, so two
runs with the same config produce byte-identical ``summary.json`` files.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluation import BucketReport, BucketSpec, BucketStats, evaluate_event, pool_reports, render_report
from .features import Dataset
from .models import ModelSpec, build_model
from .rainfall import catalogue
from .sim import SimConfig, run_dataset, synthetic_dem
from .training import TrainConfig, load_model, native_spec, save_model, train, write_history

log = logging.getLogger(__name__)

RESULTS_ENV = "FLOODBENCH_RESULTS"

SHORT_TRAIN = ("tr5_1", "tr20_1", "tr50_1", "tr2_2", "tr10_2", "tr20_2", "tr50_2", "tr5_3", "tr10_3", "tr100_3")
SHORT_VAL = ("tr100_2", "tr2_3")
SHORT_TEST = ("tr2_1", "tr10_1", "tr100_1", "tr5_2", "tr20_3", "tr50_3")


class ExperimentError(ValueError):
    pass


class SplitLeakageError(ExperimentError):
    pass


class ManifestError(ExperimentError, KeyError):
    pass


def results_root(override: str | Path | None = None) -> Path:
    if override is not None:
        return Path(override)
    return Path(os.environ.get(RESULTS_ENV, "results"))


@dataclass(frozen=True)
class DatasetConfig:
    dem: str = "synthetic-709"
    size: int = 64
    events: str = "short-catalogue"
    rain_seed: int = 0
    sim: SimConfig = SimConfig(roughness_coefficient=0.005, boundary="open")

    @property
    def catchment(self) -> str:
        if not self.dem.startswith("synthetic-"):
            raise ExperimentError(f"unknown DEM {self.dem!r}; expected synthetic-709 or synthetic-744")
        return self.dem.split("-", 1)[1]

    def key(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return f"{self.dem}-{self.size}-{self.events}-{hashlib.sha256(blob).hexdigest()[:10]}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sim"] = asdict(self.sim)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        d["sim"] = SimConfig(**d.get("sim", {}))
        return cls(**d)


@dataclass(frozen=True)
class ModelRun:
    """One model pipeline: what to build and how to train it.

    ``method`` is ignored for non-parametric families. ``train`` holds
    per-model overrides of the experiment-wide training settings.
    """

    model: ModelSpec
    method: str = "direct_12ts"
    train: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        if self.model.label != self.model.family:
            return self.model.label
        if not self.model.trainable:
            return self.model.family
        return f"{self.model.family}-{self.method}"

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "method": self.method, "train": dict(self.train)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelRun":
        return cls(ModelSpec.from_dict(d["model"]), d.get("method", "direct_12ts"), dict(d.get("train", {})))


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    dataset: DatasetConfig
    train_events: tuple[str, ...]
    val_events: tuple[str, ...]
    test_events: tuple[str, ...]
    models: tuple[ModelRun, ...]
    T: int = 5
    H: int = 12
    eval_patch_size: int = 64
    train: dict = field(default_factory=dict)
    bucket_edges: tuple[float, ...] = BucketSpec().edges
    seed: int = 0
    reuse_checkpoints_from: str | None = None

    def __post_init__(self) -> None:
        for name in ("train_events", "val_events", "test_events", "models", "bucket_edges"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        splits = {"train": self.train_events, "val": self.val_events, "test": self.test_events}
        for a, b in (("train", "val"), ("train", "test"), ("val", "test")):
            shared = set(splits[a]) & set(splits[b])
            if shared:
                raise SplitLeakageError(f"events {sorted(shared)} appear in both {a} and {b} splits")
        if not self.test_events:
            raise ExperimentError("no test events")
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ExperimentError(f"duplicate model names {names}")
        BucketSpec(self.bucket_edges)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dataset": self.dataset.to_dict(),
            "split": {"train": list(self.train_events), "val": list(self.val_events), "test": list(self.test_events)},
            "features": {"T": self.T, "H": self.H, "eval_patch_size": self.eval_patch_size},
            "models": [m.to_dict() for m in self.models],
            "train": dict(self.train),
            "bucket_edges": list(self.bucket_edges),
            "seed": self.seed,
            "reuse_checkpoints_from": self.reuse_checkpoints_from,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        split = d.get("split", {})
        feats = d.get("features", {})
        return cls(
            name=d["name"],
            dataset=DatasetConfig.from_dict(d.get("dataset", {})),
            train_events=split.get("train", ()),
            val_events=split.get("val", ()),
            test_events=split.get("test", ()),
            models=tuple(ModelRun.from_dict(m) for m in d.get("models", ())),
            T=feats.get("T", 5),
            H=feats.get("H", 12),
            eval_patch_size=feats.get("eval_patch_size", 64),
            train=dict(d.get("train", {})),
            bucket_edges=tuple(d.get("bucket_edges", BucketSpec().edges)),
            seed=d.get("seed", 0),
            reuse_checkpoints_from=d.get("reuse_checkpoints_from"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed)

    def train_config(self, run: ModelRun) -> TrainConfig:
        settings = {**self.train, **run.train, "method": run.method, "seed": self.seed}
        return TrainConfig.for_family(run.model.family, **settings)


def fingerprint(obj) -> str:
    """Short stable hash of a JSON-serialisable object."""
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------- #
# Built-in desk-scale configurations
# --------------------------------------------------------------------------- #

DESK_TRAIN = {"epochs": 15, "patches_per_epoch": 256, "patch_size": 32, "batch_size": 8, "val_patches": 64}


def _runs(entries: Sequence[tuple[str, str, tuple[int, ...]]]) -> tuple[ModelRun, ...]:
    return tuple(ModelRun(ModelSpec(family, T=5, H=12, widths=widths), method) for family, method, widths in entries)


_BASELINES = [("no_change", "one_ts", ()), ("linear_extrap", "one_ts", ()),
              ("ar_1x1", "one_ts", ()), ("ar_5x5", "one_ts", ())]
_DEEP = [("fcn", "direct_12ts", (32, 32)), ("autoencoder", "direct_12ts", (16, 32, 64)),
         ("unet", "direct_12ts", (16, 32, 64)), ("graph", "direct_12ts", (32, 32))]
_ONE_STEP = [("fcn", "one_ts", (32, 32)), ("graph", "one_ts", (32, 32))]


def short_events_config(seed: int = 0) -> ExperimentConfig:
    return ExperimentConfig(
        name="short-events",
        dataset=DatasetConfig(dem="synthetic-709", events="short-catalogue"),
        train_events=SHORT_TRAIN,
        val_events=SHORT_VAL,
        test_events=SHORT_TEST,
        models=_runs(_BASELINES + _DEEP + _ONE_STEP),
        train=dict(DESK_TRAIN),
        seed=seed,
    )


def long_events_config(seed: int = 0) -> ExperimentConfig:
    return ExperimentConfig(
        name="long-events",
        dataset=DatasetConfig(dem="synthetic-709", events="full-catalogue"),
        train_events=SHORT_TRAIN + ("real1_c1", "tr50_3c2"),
        val_events=SHORT_VAL + ("tr50_3c1",),
        test_events=("real2_c1",),
        models=_runs(_BASELINES + _DEEP),
        train=dict(DESK_TRAIN),
        seed=seed,
    )


def cross_catchment_config(seed: int = 0) -> ExperimentConfig:
    return ExperimentConfig(
        name="cross-catchment",
        dataset=DatasetConfig(dem="synthetic-744", events="long-catalogue"),
        train_events=(),
        val_events=(),
        test_events=("real1_c1",),
        models=_runs(_BASELINES + _DEEP),
        train=dict(DESK_TRAIN),
        seed=seed,
        reuse_checkpoints_from="long-events",
    )


BUILTIN = {
    "short-events": short_events_config,
    "long-events": long_events_config,
    "cross-catchment": cross_catchment_config,
}


def builtin_config(name: str, seed: int = 0) -> ExperimentConfig:
    try:
        return BUILTIN[name](seed)
    except KeyError:
        raise ExperimentError(f"unknown experiment {name!r}; expected one of {sorted(BUILTIN)}") from None


# --------------------------------------------------------------------------- #
# Running
# --------------------------------------------------------------------------- #

def ensure_dataset(cfg: DatasetConfig, root: Path) -> Path:
    """Simulate the dataset unless an identical one already exists."""
    out = root / "data" / cfg.key()
    if (out / "manifest.json").exists():
        return out
    dem, mask = synthetic_dem(cfg.catchment, cfg.size)
    tmp = out.with_name(out.name + ".partial")
    run_dataset(dem, mask, catalogue(cfg.events, cfg.rain_seed), cfg.sim, tmp)
    tmp.rename(out)
    return out


def check_events(cfg: ExperimentConfig, data_dir: Path) -> None:
    manifest = json.loads((data_dir / "manifest.json").read_text())
    wanted = cfg.train_events + cfg.val_events + cfg.test_events
    missing = sorted(set(wanted) - set(manifest["events"]))
    if missing:
        raise ManifestError(f"events {missing} are not in {data_dir / 'manifest.json'}")


def _pipeline(cfg: ExperimentConfig, run: ModelRun, data_dir: Path, out_dir: Path, reuse_dir: Path | None) -> dict:
    ds = Dataset.load(data_dir, sorted(set(cfg.train_events + cfg.val_events + cfg.test_events)))
    out_dir.mkdir(parents=True, exist_ok=True)
    entry: dict = {"family": run.model.family, "method": run.method if run.model.trainable else None}
    if reuse_dir is not None and run.model.trainable:
        model = load_model(reuse_dir / run.name / "checkpoint")
        entry["checkpoint_from"] = reuse_dir.name
    elif run.model.trainable:
        tcfg = cfg.train_config(run)
        result = train(run.model, ds, tcfg, cfg.train_events, cfg.val_events)
        model = result.model
        save_model(model, out_dir / "checkpoint", tcfg, result.adam)
        write_history(result.history, out_dir / "history.csv")
        entry["best_epoch"] = result.best_epoch
        entry["final_train_loss"] = result.history[-1].train_loss
        entry["best_val_loss"] = min(h.val_loss for h in result.history)
    else:
        model = build_model(native_spec(run.model, "one_ts"))
    entry["n_parameters"] = model.n_parameters()
    bspec = BucketSpec(cfg.bucket_edges)
    reports = [evaluate_event(model, ds, e, cfg.H, cfg.eval_patch_size, bspec, name=run.name)
               for e in cfg.test_events]
    pooled = pool_reports(reports, "pooled")
    render_report(reports, out_dir, "report", title=f"{cfg.name}: {run.name}")
    entry["events"] = {r.event: r.summary() for r in reports}
    entry["pooled"] = pooled.summary()
    entry["median_m"] = [s.median for s in pooled.stats]
    return entry


def _pipeline_star(args):
    return _pipeline(*args)


def run_experiment(
    cfg: ExperimentConfig,
    root: str | Path | None = None,
    parallel_models: int = 1,
) -> Path:
    """Run every model pipeline of ``cfg``; returns the experiment directory."""
    root = results_root(root)
    exp_dir = root / cfg.name
    exp_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(exp_dir / "config.json")
    reuse_dir = None
    if cfg.reuse_checkpoints_from:
        reuse_dir = root / cfg.reuse_checkpoints_from
        needed = [r for r in cfg.models if r.model.trainable]
        if any(not (reuse_dir / r.name / "checkpoint" / "model.json").exists() for r in needed):
            log.info("checkpoints missing in %s; running %s first", reuse_dir, cfg.reuse_checkpoints_from)
            run_experiment(builtin_config(cfg.reuse_checkpoints_from, cfg.seed), root, parallel_models)
    data_dir = ensure_dataset(cfg.dataset, root)
    check_events(cfg, data_dir)
    jobs = [(cfg, run, data_dir, exp_dir / run.name, reuse_dir) for run in cfg.models]
    if parallel_models > 1:
        with ProcessPoolExecutor(max_workers=parallel_models) as pool:
            entries = list(pool.map(_pipeline_star, jobs))
    else:
        entries = [_pipeline(*job) for job in jobs]
    models = dict(zip((r.name for r in cfg.models), entries))

    _render_pooled(cfg, exp_dir)
    summary = {
        "experiment": cfg.name,
        "fingerprint": cfg.fingerprint(),
        "seed": cfg.seed,
        "dataset": cfg.dataset.key(),
        "bucket_labels": [BucketSpec(cfg.bucket_edges).label(b) for b in range(1, len(cfg.bucket_edges) + 1)],
        "models": models,
    }
    (exp_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return exp_dir


def _render_pooled(cfg: ExperimentConfig, exp_dir: Path) -> None:
    """Experiment-level CSV/SVG: every model's M values pooled over test events."""
    reports = []
    for run in cfg.models:
        model_dir = exp_dir / run.name
        per_event = []
        for event in cfg.test_events:
            values = {}
            for path in sorted((model_dir / "spill").glob(f"*__{event}__b*.npy")):
                values[int(path.stem.rsplit("__b", 1)[1])] = np.load(path)
            per_event.append(report_from_values(run.name, event, values, cfg))
        reports.append(pool_reports(per_event, "pooled"))
    render_report(reports, exp_dir, "report", title=cfg.name)


def report_from_values(model: str, event: str, values: dict[int, np.ndarray], cfg: ExperimentConfig) -> BucketReport:
    spec = BucketSpec(cfg.bucket_edges)
    stats = [BucketStats.from_values(b, spec.label(b), values.get(b), len(values.get(b, ())), None)
             for b in range(1, spec.n_buckets + 1)]
    return BucketReport(model, event, stats, values)
