"""Weighted loss, the three training methods and the epoch loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .features import Batch, Dataset, FeatureSpec, Sample, build_stack, sample_patches, stable_seed
from .models import Model, ModelSpec, Prediction, build_model, feature_tensor, predict, rollout_tensor
from .raster import CatchmentMask, Raster

log = logging.getLogger(__name__)

METHODS = ("one_ts", "direct_12ts", "iterative_12ts")


class TrainingError(ValueError):
    pass


class TrainingConfigError(TrainingError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    method: str = "direct_12ts"
    epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 8
    patches_per_epoch: int = 512
    val_patches: int = 64
    patch_size: int = 128
    loss_threshold_m: float = 0.20
    loss_factor: float = 4.0
    wet_bias: float = 0.5
    supervise_all_steps: bool = False
    clip_norm: float = 1.0
    normalizer_patches: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise TrainingConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        for name in ("epochs", "batch_size", "patches_per_epoch", "patch_size", "normalizer_patches"):
            if getattr(self, name) < 1:
                raise TrainingConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("learning_rate", "loss_factor", "clip_norm"):
            if not getattr(self, name) > 0:
                raise TrainingConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.val_patches < 0 or self.loss_threshold_m < 0:
            raise TrainingConfigError("val_patches and loss_threshold_m must be non-negative")

    @classmethod
    def for_family(cls, family: str, **overrides) -> "TrainConfig":
        """Defaults, with the slower and longer schedule for the autoencoder."""
        base = dict(epochs=50, learning_rate=1e-4) if family == "autoencoder" else {}
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    model: Model
    history: list[EpochRecord]
    best_epoch: int
    adam: ad.AdamState


def _cells(x) -> np.ndarray:
    if isinstance(x, Raster):
        return x.cells
    if isinstance(x, CatchmentMask):
        return np.asarray(x.inside)
    return np.asarray(x)


def weighted_mae(pred, target, mask, threshold: float = 0.20, factor: float = 4.0):
    """Mean over inside-mask cells of ``w * |pred - target|``.

    ``w`` is ``factor`` where the target change exceeds ``threshold`` in
    magnitude and 1 elsewhere. Returns a Tensor when ``pred`` is one, so the
    loss can be differentiated, and a float otherwise.
    """
    target = _cells(target)
    mask = _cells(mask).astype(np.float64)
    pred_shape = pred.shape if isinstance(pred, Tensor) else _cells(pred).shape
    if pred_shape != target.shape or mask.shape != target.shape:
        raise TrainingError(f"shape mismatch: pred {pred_shape}, target {target.shape}, mask {mask.shape}")
    n_inside = mask.sum()
    if n_inside == 0:
        raise TrainingError("weighted_mae over an empty mask")
    weights = np.where(np.abs(target) > threshold, factor, 1.0) * mask / n_inside
    if isinstance(pred, Tensor):
        return ad.total(ad.mul(ad.absolute(ad.sub(pred, target)), weights))
    return float(np.sum(weights * np.abs(_cells(pred) - target)))


def native_spec(spec: ModelSpec, method: str) -> ModelSpec:
    """Model spec at the horizon the network is actually trained for."""
    if method == "direct_12ts":
        return spec
    return replace(spec, H=1)


def sample_spec(spec: ModelSpec, cfg: TrainConfig) -> FeatureSpec:
    H = 1 if cfg.method == "one_ts" else spec.H
    return FeatureSpec(T=spec.T, H=H, patch_size=cfg.patch_size)


def batch_loss(model: Model, batch: Batch, cfg: TrainConfig) -> Tensor:
    kw = dict(threshold=cfg.loss_threshold_m, factor=cfg.loss_factor)
    if cfg.method != "iterative_12ts":
        return weighted_mae(model(Tensor(batch.stack())), batch.target_delta, batch.mask, **kw)
    H = batch.spec.H
    frames = [Tensor(batch.depths[:, i:i + 1]) for i in range(batch.depths.shape[1])]
    outs = rollout_tensor(model, batch.static, batch.rain, frames, H, clamp_last=False)
    current = batch.depths[:, -1:]
    if not cfg.supervise_all_steps:
        return weighted_mae(ad.sub(outs[-1], current), batch.target_delta, batch.mask, **kw)
    if batch.future is None:
        raise TrainingError("supervising every step needs the true intermediate frames")
    terms = [
        weighted_mae(ad.sub(out, current), batch.future[:, k:k + 1] - current, batch.mask, **kw)
        for k, out in enumerate(outs)
    ]
    loss = terms[0]
    for term in terms[1:]:
        loss = ad.add(loss, term)
    return ad.mul(loss, 1.0 / len(terms))


def _batches(samples: Sequence[Sample], size: int) -> list[Batch]:
    return [Batch.from_samples(samples[i:i + size]) for i in range(0, len(samples), size)]


def _first_step_stacks(batch: Batch, model: Model) -> np.ndarray:
    n_rain = model.fspec.n_rain
    return build_stack(batch.static, batch.rain[:, :n_rain], batch.depths, model.fspec)


def train(
    model_spec: ModelSpec,
    dataset: Dataset,
    cfg: TrainConfig,
    train_events: Sequence[str] | None = None,
    val_events: Sequence[str] = (),
) -> TrainResult:
    """Fit a parametric model and keep the parameters of the best epoch.

    ``model_spec.H`` is the horizon the model is evaluated at. ``one_ts`` and
    ``iterative_12ts`` train a one-step network; ``direct_12ts`` trains one
    that jumps the full horizon. Validation loss uses the same objective as
    training; without validation events the training loss selects the epoch.
    """
    if not model_spec.trainable:
        raise TrainingConfigError(f"{model_spec.family} has no parameters to train")
    train_events = sorted(dataset.events) if train_events is None else list(train_events)
    if not train_events:
        raise TrainingError("no training events")
    model = build_model(native_spec(model_spec, cfg.method))
    sspec = sample_spec(model_spec, cfg)

    first = sample_patches(dataset, train_events, sspec, cfg.patches_per_epoch,
                           seed=stable_seed(cfg.seed, "train", 0), wet_bias=cfg.wet_bias)
    norm_batch = Batch.from_samples(first[:cfg.normalizer_patches])
    model.fit_normalizer(_first_step_stacks(norm_batch, model))

    val_batches: list[Batch] = []
    if val_events and cfg.val_patches:
        val_samples = sample_patches(dataset, list(val_events), sspec, cfg.val_patches,
                                     seed=stable_seed(cfg.seed, "val"), wet_bias=cfg.wet_bias)
        val_batches = _batches(val_samples, cfg.batch_size)

    adam = ad.AdamState(learning_rate=cfg.learning_rate)
    names = sorted(model.params)
    history: list[EpochRecord] = []
    best = (np.inf, 0, model.arrays())
    for epoch in range(cfg.epochs):
        samples = first if epoch == 0 else sample_patches(
            dataset, train_events, sspec, cfg.patches_per_epoch,
            seed=stable_seed(cfg.seed, "train", epoch), wet_bias=cfg.wet_bias)
        losses = []
        for batch in _batches(samples, cfg.batch_size):
            for p in model.params.values():
                p.grad = None
            loss = batch_loss(model, batch, cfg)
            loss.backward()
            if cfg.method == "iterative_12ts":
                ad.clip_grad_norm([model.params[n] for n in names], cfg.clip_norm)
            grads = {n: model.params[n].grad for n in names if model.params[n].grad is not None}
            ad.adam_step(model.params, grads, adam)
            losses.append(loss.item() * len(batch))
        train_loss = float(np.sum(losses) / len(samples))
        val_loss = evaluate_loss(model, val_batches, cfg) if val_batches else float("nan")
        history.append(EpochRecord(epoch + 1, train_loss, val_loss))
        log.info("%s epoch %d train %.5f val %.5f", model_spec.label, epoch + 1, train_loss, val_loss)
        score = val_loss if val_batches else train_loss
        if score < best[0]:
            best = (score, epoch + 1, model.arrays())
    model.load_arrays(best[2])
    return TrainResult(model=model, history=history, best_epoch=best[1], adam=adam)


def evaluate_loss(model: Model, batches: Sequence[Batch], cfg: TrainConfig) -> float:
    total, count = 0.0, 0
    with ad.no_grad():
        for batch in batches:
            total += batch_loss(model, batch, cfg).item() * len(batch)
            count += len(batch)
    return total / count


def rollout(model: Model, sample: Sample, steps: int) -> Prediction:
    """Chain ``steps`` one-step predictions from a sample's history window."""
    frames = [Tensor(sample.depths[i:i + 1][None]) for i in range(sample.depths.shape[0])]
    with ad.no_grad():
        outs = rollout_tensor(model, sample.static[None], sample.rain[None], frames, steps)
    return Prediction(delta=outs[-1].data[0, 0] - sample.current_depth, current=sample.current_depth)


def single_step(model: Model, sample: Sample) -> Prediction:
    return predict(model, sample)


# --------------------------------------------------------------------------- #
# Persistence
# --------------------------------------------------------------------------- #

def write_history(history: Sequence[EpochRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for rec in history:
            writer.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_loss)])


def read_history(path: str | Path) -> list[EpochRecord]:
    with open(path) as fh:
        return [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]))
                for r in csv.DictReader(fh)]


def save_model(model: Model, directory: str | Path, train_cfg: TrainConfig | None = None,
               adam: ad.AdamState | None = None) -> Path:
    descriptor = {"model": model.spec.to_dict(), "train": None if train_cfg is None else train_cfg.to_dict()}
    return ad.save_checkpoint(directory, descriptor, model.arrays(), adam)


def load_model(directory: str | Path) -> Model:
    descriptor, arrays, _ = ad.load_checkpoint(directory)
    model = build_model(ModelSpec.from_dict(descriptor["model"]))
    model.load_arrays(arrays)
    return model
