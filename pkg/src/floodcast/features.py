"""Model input stacks and training patch sampling.

Channel order of an assembled stack::

    D (1) | dD left, right, down, up (4) | R (T+H-1) | W (T) | dW (T-1)

Rainfall channel ``k`` carries the intensity of simulation step
``t - T + 2 + k``, broadcast over the raster, so the window covers the rain
that falls between the oldest observed frame and the target frame.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rainfall import RainEvent, load_event_csv
from .raster import (
    CatchmentMask,
    Raster,
    RasterStack,
    dem_path,
    mask_from_dem,
    read_raster,
    read_stack,
    write_stack,
)

DDEM_LABELS = ("dD_left", "dD_right", "dD_down", "dD_up")
PAD_VALUE = -1.0
WET_CHANGE_M = 0.01


class FeatureError(ValueError):
    pass


class FeatureRangeError(FeatureError, IndexError):
    """Not enough history or future frames around an anchor."""


@dataclass(frozen=True)
class FeatureSpec:
    T: int = 5
    H: int = 12
    include_delta_dem: bool = True
    include_delta_wd: bool = True
    patch_size: int = 128

    def __post_init__(self) -> None:
        if self.T < 1 or self.H < 1 or self.patch_size < 1:
            raise FeatureError(f"T, H and patch_size must be >= 1: {self}")

    @property
    def n_rain(self) -> int:
        return self.T + self.H - 1

    @property
    def n_channels(self) -> int:
        n = 1 + self.n_rain + self.T
        if self.include_delta_dem:
            n += 4
        if self.include_delta_wd:
            n += self.T - 1
        return n

    def labels(self) -> tuple[str, ...]:
        labels = ["D"]
        if self.include_delta_dem:
            labels += list(DDEM_LABELS)
        labels += [f"R{k}" for k in range(self.n_rain)]
        labels += [f"W{k}" for k in range(self.T)]
        if self.include_delta_wd:
            labels += [f"dW{k}" for k in range(self.T - 1)]
        return tuple(labels)

    def slices(self) -> dict[str, slice]:
        """Channel ranges of each feature group inside an assembled stack."""
        out = {}
        i = 0
        for name, width in (
            ("D", 1),
            ("dD", 4 if self.include_delta_dem else 0),
            ("R", self.n_rain),
            ("W", self.T),
            ("dW", self.T - 1 if self.include_delta_wd else 0),
        ):
            out[name] = slice(i, i + width)
            i += width
        return out

    def with_horizon(self, H: int) -> "FeatureSpec":
        return replace(self, H=H)

    def to_dict(self) -> dict:
        return dict(T=self.T, H=self.H, include_delta_dem=self.include_delta_dem,
                    include_delta_wd=self.include_delta_wd, patch_size=self.patch_size)


def delta_dem_array(d: np.ndarray) -> np.ndarray:
    """(4, rows, cols) elevation differences to the four neighbours, -1 padded."""
    d = np.asarray(d, dtype=np.float64)
    padded = np.pad(d, 1, constant_values=PAD_VALUE)
    centre = padded[1:-1, 1:-1]
    return np.stack([
        centre - padded[1:-1, :-2],  # leftward: c(i) - c(i-1)
        centre - padded[1:-1, 2:],   # rightward: c(i) - c(i+1)
        centre - padded[:-2, 1:-1],  # downward: r(j) - r(j-1)
        centre - padded[2:, 1:-1],   # upward: r(j) - r(j+1)
    ])


def delta_dem(d: Raster) -> RasterStack:
    return RasterStack(delta_dem_array(d.cells), DDEM_LABELS)


def delta_wd(frames: Sequence[Raster]) -> RasterStack:
    if len(frames) < 2:
        raise FeatureError(f"delta_wd needs at least 2 frames, got {len(frames)}")
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise FeatureError(f"frames differ in shape: {sorted(shapes)}")
    w = np.stack([f.cells for f in frames])
    return RasterStack(np.diff(w, axis=0), tuple(f"dW{k}" for k in range(len(frames) - 1)))


@dataclass(frozen=True, eq=False)
class Sample:
    """One (patch, anchor) example.

    ``static`` holds D and the four dD channels, ``depths`` the T observed
    frames oldest first, ``rain`` the T+H-1 scalar intensities.
    """

    static: np.ndarray
    rain: np.ndarray
    depths: np.ndarray
    target_delta: np.ndarray
    mask: np.ndarray
    event_name: str
    anchor: tuple[int, int, int]
    spec: FeatureSpec
    future: np.ndarray | None = None  # true frames t+1 .. t+H when known

    @property
    def shape(self) -> tuple[int, int]:
        return self.depths.shape[1:]

    @property
    def current_depth(self) -> np.ndarray:
        return self.depths[-1]

    @property
    def target_depth(self) -> np.ndarray:
        return self.depths[-1] + self.target_delta

    def stack(self) -> np.ndarray:
        return build_stack(self.static[None], self.rain[None], self.depths[None], self.spec)[0]

    @property
    def input(self) -> RasterStack:
        return RasterStack(self.stack(), self.spec.labels())

    def crop(self, row: int, col: int, size: int) -> "Sample":
        sl = (slice(row, row + size), slice(col, col + size))
        r0, c0, t = self.anchor
        return Sample(
            static=self.static[(slice(None),) + sl],
            rain=self.rain,
            depths=self.depths[(slice(None),) + sl],
            target_delta=self.target_delta[sl],
            mask=self.mask[sl],
            event_name=self.event_name,
            anchor=(r0 + row, c0 + col, t),
            spec=self.spec,
            future=None if self.future is None else self.future[(slice(None),) + sl],
        )


def build_stack(static: np.ndarray, rain: np.ndarray, depths: np.ndarray, spec: FeatureSpec) -> np.ndarray:
    """Batched assembly: static (N,5,h,w), rain (N,T+H-1), depths (N,T,h,w)."""
    n, _, h, w = static.shape
    parts = [static[:, :1]]
    if spec.include_delta_dem:
        parts.append(static[:, 1:5])
    parts.append(np.broadcast_to(rain[:, :, None, None], (n, rain.shape[1], h, w)))
    parts.append(depths)
    if spec.include_delta_wd and spec.T > 1:
        parts.append(np.diff(depths, axis=1))
    return np.concatenate(parts, axis=1)


@dataclass
class EventData:
    event: RainEvent
    depths: np.ndarray  # (frames, rows, cols)

    @property
    def name(self) -> str:
        return self.event.name

    @property
    def n_frames(self) -> int:
        return self.depths.shape[0]

    def anchors(self, spec: FeatureSpec) -> range:
        """Valid anchor times for the given history and horizon."""
        return range(spec.T - 1, self.n_frames - spec.H)


@dataclass
class Dataset:
    """A DEM plus simulated events, held in memory."""

    dem: Raster
    mask: CatchmentMask
    events: dict[str, EventData] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.static = np.concatenate([self.dem.cells[None], delta_dem_array(self.dem.cells)])

    @classmethod
    def load(cls, root: str | Path, names: Iterable[str] | None = None) -> "Dataset":
        root = Path(root)
        manifest = json.loads((root / "manifest.json").read_text())
        dem = read_raster(dem_path(root))
        ds = cls(dem, mask_from_dem(dem))
        wanted = sorted(manifest["events"]) if names is None else list(names)
        for name in wanted:
            if name not in manifest["events"]:
                raise KeyError(f"event {name!r} not in {root / 'manifest.json'}")
            entry = manifest["events"][name]
            event = load_event_csv(root / entry["rain"])
            depths = np.stack([read_raster(root / p).cells for p in entry["frames"]])
            ds.events[name] = EventData(event, depths)
        return ds

    def subset(self, names: Iterable[str]) -> "Dataset":
        out = Dataset(self.dem, self.mask)
        for name in names:
            out.events[name] = self.events[name]
        return out


def assemble(
    dem: Raster,
    mask: CatchmentMask,
    frames: Sequence[Raster] | np.ndarray,
    event: RainEvent,
    t: int,
    spec: FeatureSpec,
    static: np.ndarray | None = None,
) -> Sample:
    """Full-raster sample anchored at frame ``t``.

    ``frames`` is the whole simulated sequence of the event; frames
    ``t-T+1 .. t`` are the inputs and ``t+H`` the target.
    """
    depths = frames if isinstance(frames, np.ndarray) else np.stack([f.cells for f in frames])
    if depths.shape[1:] != dem.shape or mask.shape != dem.shape:
        raise FeatureError(f"frame/mask shapes do not match DEM {dem.shape}")
    first = t - spec.T + 1
    if first < 0:
        raise FeatureRangeError(f"anchor t={t} needs {spec.T} history frames")
    if t + spec.H >= depths.shape[0]:
        raise FeatureRangeError(f"anchor t={t} with H={spec.H} exceeds {depths.shape[0]} frames")
    rain_lo = t - spec.T + 2
    rain_hi = t + spec.H + 1
    if rain_hi > event.duration_steps:
        raise FeatureRangeError(f"event {event.name} has no rainfall for step {rain_hi - 1}")
    if static is None:
        static = np.concatenate([dem.cells[None], delta_dem_array(dem.cells)])
    rain = event.as_array()[rain_lo:rain_hi]
    window = depths[first:t + 1]
    return Sample(
        static=static,
        rain=rain,
        depths=window,
        target_delta=depths[t + spec.H] - depths[t],
        mask=np.asarray(mask.inside),
        event_name=event.name,
        anchor=(0, 0, t),
        spec=spec,
        future=depths[t + 1:t + spec.H + 1],
    )


def dataset_sample(ds: Dataset, name: str, t: int, spec: FeatureSpec) -> Sample:
    ev = ds.events[name]
    return assemble(ds.dem, ds.mask, ev.depths, ev.event, t, spec, static=ds.static)


def _window_sums(indicator: np.ndarray, size: int) -> np.ndarray:
    """Count of true cells in every size x size window, indexed by its corner."""
    ii = np.pad(np.cumsum(np.cumsum(indicator.astype(np.int64), 0), 1), ((1, 0), (1, 0)))
    return ii[size:, size:] - ii[:-size, size:] - ii[size:, :-size] + ii[:-size, :-size]


def stable_seed(*parts: object) -> int:
    """Deterministic 32-bit seed from arbitrary labels."""
    return zlib.crc32("/".join(map(str, parts)).encode())


def sample_patches(
    ds: Dataset,
    events: Sequence[str],
    spec: FeatureSpec,
    n: int,
    seed: int,
    wet_bias: float = 0.5,
) -> list[Sample]:
    """Draw ``n`` random patches.

    ``round(n * wet_bias)`` of them come from anchors whose target patch has at
    least one inside cell changing by more than 1 cm; the rest are uniform
    over (event, anchor time, patch corner). Patches without any inside cell
    are never drawn.
    """
    if not 0.0 <= wet_bias <= 1.0:
        raise FeatureError(f"wet_bias must be in [0, 1], got {wet_bias}")
    if n == 0:
        return []
    rows, cols = ds.dem.shape
    p = spec.patch_size
    if rows < p or cols < p:
        raise FeatureError(f"raster {rows}x{cols} smaller than patch {p}")
    inside = np.asarray(ds.mask.inside)
    valid_corner = _window_sums(inside, p) > 0
    corners = np.argwhere(valid_corner)
    pairs = [(name, t) for name in events for t in ds.events[name].anchors(spec)]
    if not pairs:
        raise FeatureRangeError(f"no event has enough frames for T={spec.T}, H={spec.H}")
    rng = np.random.default_rng(seed)
    n_wet = int(round(n * wet_bias))

    def wet_map(name: str, t: int) -> np.ndarray:
        d = ds.events[name].depths
        return inside & (np.abs(d[t + spec.H] - d[t]) > WET_CHANGE_M)

    wet_pairs = [pt for pt in pairs if wet_map(*pt).any()] if n_wet else []
    if n_wet and not wet_pairs:
        n_wet = 0
    picks: list[tuple[str, int, int, int]] = []
    for _ in range(n - n_wet):
        name, t = pairs[rng.integers(len(pairs))]
        r0, c0 = corners[rng.integers(len(corners))]
        picks.append((name, t, int(r0), int(c0)))
    for _ in range(n_wet):
        name, t = wet_pairs[rng.integers(len(wet_pairs))]
        wet_corners = np.argwhere(_window_sums(wet_map(name, t), p) > 0)
        r0, c0 = wet_corners[rng.integers(len(wet_corners))]
        picks.append((name, t, int(r0), int(c0)))
    order = rng.permutation(len(picks))
    out = []
    for i in order:
        name, t, r0, c0 = picks[i]
        out.append(dataset_sample(ds, name, t, spec).crop(r0, c0, p))
    return out


@dataclass
class Batch:
    """Samples stacked along a leading batch axis."""

    static: np.ndarray
    rain: np.ndarray
    depths: np.ndarray
    target_delta: np.ndarray
    mask: np.ndarray
    spec: FeatureSpec
    future: np.ndarray | None = None

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "Batch":
        specs = {s.spec for s in samples}
        if len(specs) != 1:
            raise FeatureError("cannot batch samples with different feature specs")
        return cls(
            static=np.stack([s.static for s in samples]),
            rain=np.stack([s.rain for s in samples]),
            depths=np.stack([s.depths for s in samples]),
            target_delta=np.stack([s.target_delta for s in samples])[:, None],
            mask=np.stack([s.mask for s in samples])[:, None],
            spec=samples[0].spec,
            future=None if any(s.future is None for s in samples) else np.stack([s.future for s in samples]),
        )

    def __len__(self) -> int:
        return self.static.shape[0]

    def stack(self) -> np.ndarray:
        return build_stack(self.static, self.rain, self.depths, self.spec)


# --------------------------------------------------------------------------- #
# Sample cache
# --------------------------------------------------------------------------- #

def write_samples(samples: Sequence[Sample], out_dir: str | Path) -> Path:
    """One stack file per sample (input channels, target, mask) plus index.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        fname = f"sample_{i:05d}.stk"
        payload = np.concatenate([s.stack(), s.target_delta[None], s.mask[None].astype(np.float64)])
        write_stack(payload, out_dir / fname)
        entries.append({
            "file": fname,
            "event": s.event_name,
            "anchor": list(s.anchor),
            "rain": [float(v) for v in s.rain],
        })
    spec = samples[0].spec.to_dict() if samples else None
    labels = list(samples[0].spec.labels()) + ["target_delta", "mask"] if samples else []
    index = {"spec": spec, "labels": labels, "samples": entries}
    path = out_dir / "index.json"
    path.write_text(json.dumps(index, indent=2))
    return path


def read_samples(index_path: str | Path) -> list[Sample]:
    index_path = Path(index_path)
    index = json.loads(index_path.read_text())
    if not index["samples"]:
        return []
    spec = FeatureSpec(**index["spec"])
    if not (spec.include_delta_dem and spec.include_delta_wd):
        raise FeatureError("sample cache only round-trips stacks with all feature groups")
    sl = spec.slices()
    out = []
    for entry in index["samples"]:
        arr = read_stack(index_path.parent / entry["file"])
        out.append(Sample(
            static=np.concatenate([arr[sl["D"]], arr[sl["dD"]]]),
            rain=np.asarray(entry["rain"], dtype=np.float64),
            depths=arr[sl["W"]],
            target_delta=arr[-2],
            mask=arr[-1] > 0.5,
            event_name=entry["event"],
            anchor=tuple(entry["anchor"]),
            spec=spec,
        ))
    return out
