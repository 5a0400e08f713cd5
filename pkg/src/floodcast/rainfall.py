"""Synthetic hyetographs for the short and long rainfall catalogues.

Intensities are in mm/h, one value per 5-minute simulation step. The depth
model is synthetic: the hourly total grows with ``log(return_period)`` and a
seeded random block shape distributes it. Nothing here is calibrated to real
intensity-duration-frequency curves.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal

import numpy as np

STEP_MINUTES = 5
SHORT_RAIN_STEPS = 12
DECAY_STEPS = 49  # 12 + 49 = 61 frames for a short event
RETURN_PERIODS = (2, 5, 10, 20, 50, 100)
DISCRETIZATIONS = {5: 1, 10: 2, 15: 3}
LONG_PATTERNS = ("c1", "c2", "real1", "real2", "zero")

# hourly depth [mm] = BASE + SLOPE * ln(return period)
BASE_DEPTH_MM = 18.0
DEPTH_SLOPE_MM = 10.0


class RainfallError(ValueError):
    pass


@dataclass(frozen=True)
class RainEvent:
    name: str
    return_period_years: int
    discretization_minutes: int
    intensities: tuple[float, ...]
    kind: Literal["short", "long"] = "short"

    def __post_init__(self) -> None:
        values = tuple(float(v) for v in self.intensities)
        if not values:
            raise RainfallError(f"event {self.name!r} has no steps")
        if any(not math.isfinite(v) or v < 0 for v in values):
            raise RainfallError(f"event {self.name!r} has negative or non-finite intensity")
        if self.kind not in ("short", "long"):
            raise RainfallError(f"unknown event kind {self.kind!r}")
        object.__setattr__(self, "intensities", values)

    @property
    def duration_steps(self) -> int:
        return len(self.intensities)

    @property
    def rain_steps(self) -> int:
        """Index one past the last step with non-zero rainfall."""
        nz = np.flatnonzero(np.asarray(self.intensities))
        return int(nz[-1]) + 1 if nz.size else 0

    @property
    def total_depth_mm(self) -> float:
        return float(np.sum(self.intensities)) * STEP_MINUTES / 60.0

    def as_array(self) -> np.ndarray:
        return np.asarray(self.intensities, dtype=np.float64)


def short_event_name(return_period: int, discretization: int) -> str:
    return f"tr{return_period}_{DISCRETIZATIONS[discretization]}"


def hourly_depth_mm(return_period: int) -> float:
    return BASE_DEPTH_MM + DEPTH_SLOPE_MM * math.log(return_period)


def _check_short_args(return_period: int, discretization: int) -> None:
    if return_period not in RETURN_PERIODS:
        raise RainfallError(f"return period must be one of {RETURN_PERIODS}, got {return_period}")
    if discretization not in DISCRETIZATIONS:
        raise RainfallError(f"discretization must be one of {sorted(DISCRETIZATIONS)}, got {discretization}")


def _block_shape(n_blocks: int, rng: np.random.Generator) -> np.ndarray:
    # peaked storm profile with multiplicative noise, normalised to mean 1
    peak = rng.uniform(0.2, 0.6) * (n_blocks - 1)
    width = max(1.0, rng.uniform(0.15, 0.35) * n_blocks)
    k = np.arange(n_blocks)
    shape = 0.25 + np.exp(-0.5 * ((k - peak) / width) ** 2)
    shape *= rng.uniform(0.7, 1.3, size=n_blocks)
    return shape / shape.mean()


def make_short_event(
    return_period: int,
    discretization: int,
    seed: int,
    duration_steps: int = SHORT_RAIN_STEPS + DECAY_STEPS,
) -> RainEvent:
    """One-hour event built from ``60 / discretization`` constant blocks.

    The block shape depends on ``(discretization, seed)`` only, so for a
    fixed shape the total depth grows strictly with the return period.
    """
    _check_short_args(return_period, discretization)
    if duration_steps < SHORT_RAIN_STEPS:
        raise RainfallError(f"duration_steps must be >= {SHORT_RAIN_STEPS}")
    rng = np.random.default_rng([seed, discretization])
    n_blocks = 60 // discretization
    per_block = discretization // STEP_MINUTES
    blocks = hourly_depth_mm(return_period) * _block_shape(n_blocks, rng)
    values = np.zeros(duration_steps)
    values[:SHORT_RAIN_STEPS] = np.repeat(blocks, per_block)
    return RainEvent(
        name=short_event_name(return_period, discretization),
        return_period_years=return_period,
        discretization_minutes=discretization,
        intensities=tuple(values),
        kind="short",
    )


def _continuation(base: RainEvent, pattern: str, rng: np.random.Generator) -> np.ndarray:
    mean = float(np.mean(base.intensities[:SHORT_RAIN_STEPS]))
    per_block = base.discretization_minutes // STEP_MINUTES
    if pattern == "zero":
        return np.zeros(SHORT_RAIN_STEPS)
    if pattern == "c1":
        # one further hour, tailing off
        n = SHORT_RAIN_STEPS // per_block
        k = np.arange(n)
        blocks = 0.7 * mean * np.exp(-k / max(1.0, n / 3)) * rng.uniform(0.6, 1.4, size=n)
        return np.repeat(blocks, per_block)
    if pattern == "c2":
        # three further hours: a lull, then a second burst, then drizzle
        n = 3 * SHORT_RAIN_STEPS // per_block
        k = np.arange(n)
        burst_at = rng.uniform(0.35, 0.55) * n
        envelope = 0.15 + 0.9 * np.exp(-0.5 * ((k - burst_at) / (0.1 * n + 1)) ** 2)
        blocks = mean * envelope * rng.uniform(0.6, 1.4, size=n)
        return np.repeat(blocks, per_block)
    if pattern in ("real1", "real2"):
        # irregular 5-minute gamma noise over one further hour
        return 0.6 * mean * rng.gamma(1.5, 1.0 / 1.5, size=SHORT_RAIN_STEPS)
    raise RainfallError(f"unknown continuation pattern {pattern!r}; expected one of {LONG_PATTERNS}")


def long_event_name(base: RainEvent, pattern: str) -> str:
    if pattern.startswith("real"):
        return f"{pattern}_c1"
    suffix = {"c1": "c1", "c2": "c2", "zero": "c0"}[pattern]
    return f"{base.name}{suffix}"


def make_long_event(
    base: RainEvent,
    continuation_pattern: str,
    seed: int,
    decay_steps: int = DECAY_STEPS,
) -> RainEvent:
    """Extend a short event with a named continuation.

    The first hour reproduces ``base`` exactly. Patterns: ``c1`` (one more
    hour), ``c2`` (three more hours), ``real1``/``real2`` (one more hour of
    irregular rain, named ``realN_c1``) and ``zero`` (an hour of no rain).
    """
    if base.kind != "short":
        raise RainfallError(f"base event {base.name!r} is not a short event")
    if continuation_pattern not in LONG_PATTERNS:
        raise RainfallError(
            f"unknown continuation pattern {continuation_pattern!r}; expected one of {LONG_PATTERNS}"
        )
    rng = np.random.default_rng([seed, LONG_PATTERNS.index(continuation_pattern)])
    head = np.asarray(base.intensities[:SHORT_RAIN_STEPS])
    tail = _continuation(base, continuation_pattern, rng)
    values = np.concatenate([head, tail, np.zeros(decay_steps)])
    return RainEvent(
        name=long_event_name(base, continuation_pattern),
        return_period_years=base.return_period_years,
        discretization_minutes=base.discretization_minutes,
        intensities=tuple(values),
        kind="long",
    )


def short_catalogue(seed: int = 0) -> list[RainEvent]:
    """The 18 short events: 6 return periods x 3 discretizations."""
    return [
        make_short_event(rp, disc, seed)
        for disc in sorted(DISCRETIZATIONS)
        for rp in RETURN_PERIODS
    ]


def long_catalogue(seed: int = 0) -> list[RainEvent]:
    """tr50_3c1, tr50_3c2, real1_c1 and real2_c1."""
    tr50_3 = make_short_event(50, 15, seed)
    real1_base = make_short_event(20, 5, seed + 1001)
    real2_base = make_short_event(20, 5, seed + 2002)
    return [
        make_long_event(tr50_3, "c1", seed),
        make_long_event(tr50_3, "c2", seed),
        make_long_event(real1_base, "real1", seed),
        make_long_event(real2_base, "real2", seed),
    ]


def catalogue(which: str, seed: int = 0) -> list[RainEvent]:
    if which in ("short", "short-catalogue"):
        return short_catalogue(seed)
    if which in ("long", "long-catalogue"):
        return long_catalogue(seed)
    if which in ("all", "full-catalogue"):
        return short_catalogue(seed) + long_catalogue(seed)
    raise RainfallError(f"unknown catalogue {which!r}")


# --------------------------------------------------------------------------- #
# CSV persistence
# --------------------------------------------------------------------------- #

_META_KEYS = ("name", "return_period_years", "discretization_minutes", "kind")


def save_event_csv(event: RainEvent, path: str | Path) -> None:
    buf = io.StringIO()
    for key in _META_KEYS:
        buf.write(f"# {key}: {getattr(event, key)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step_index", "intensity_mm_per_h"])
    for i, value in enumerate(event.intensities):
        writer.writerow([i, repr(float(value))])
    Path(path).write_text(buf.getvalue())


def load_event_csv(path: str | Path) -> RainEvent:
    path = Path(path)
    meta: dict[str, str] = {}
    rows: list[str] = []
    for line in path.read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            meta[key.strip()] = value.strip()
        elif line.strip():
            rows.append(line)
    if len(rows) < 2:
        raise RainfallError(f"{path}: no intensity rows")
    reader = csv.DictReader(rows)
    values: list[float] = []
    for expected, row in enumerate(reader):
        try:
            index = int(row["step_index"])
            value = float(row["intensity_mm_per_h"])
        except (KeyError, TypeError, ValueError) as exc:
            raise RainfallError(f"{path}: malformed row {row}") from exc
        if index != expected:
            raise RainfallError(f"{path}: step_index {index} out of order (expected {expected})")
        if value < 0 or not math.isfinite(value):
            raise RainfallError(f"{path}: invalid intensity {value} at step {index}")
        values.append(value)
    name = meta.get("name", path.stem)
    return RainEvent(
        name=name,
        return_period_years=int(meta.get("return_period_years", 0)),
        discretization_minutes=int(meta.get("discretization_minutes", STEP_MINUTES)),
        intensities=tuple(values),
        kind=meta.get("kind", "short"),  # type: ignore[arg-type]
    )


def save_catalogue(events: Iterable[RainEvent], directory: str | Path) -> Path:
    """Write one CSV per event plus ``catalogue.json`` mapping name to file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for event in events:
        fname = f"{event.name}.csv"
        save_event_csv(event, directory / fname)
        manifest[event.name] = fname
    out = directory / "catalogue.json"
    out.write_text(json.dumps({"events": manifest}, indent=2, sort_keys=True))
    return out


def load_catalogue(manifest_path: str | Path) -> list[RainEvent]:
    manifest_path = Path(manifest_path)
    entries = json.loads(manifest_path.read_text())["events"]
    return [load_event_csv(manifest_path.parent / fname) for _, fname in sorted(entries.items())]
