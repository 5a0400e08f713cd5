"""Grid containers, catchment masks and the binary raster file format.

File layout (all little-endian)::

    magic     6 bytes  b"FCRAST"
    version   uint16   1
    rows      uint32
    cols      uint32
    units     8 bytes  ASCII, NUL padded
    payload   rows * cols float64, row-major

Stacks use the same layout with magic ``b"FCSTCK"`` and an extra uint32
channel count after ``cols``; the payload is channel-major.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"FCRAST"
STACK_MAGIC = b"FCSTCK"
VERSION = 1
_HEADER = struct.Struct("<6sHII8s")
_STACK_HEADER = struct.Struct("<6sHIII8s")


class RasterError(ValueError):
    """Base class for raster validation and I/O problems."""


class RasterFormatError(RasterError):
    """Header is missing, truncated or carries an unknown magic/version."""


class RasterCorruptionError(RasterError):
    """Payload length disagrees with the header dimensions."""


class EmptyCatchmentError(RasterError):
    """A DEM has no cell inside the catchment."""


def _frozen(values: np.ndarray) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Raster:
    """Immutable 2-D float64 grid.

    ``units`` is a short tag such as ``"m"`` or ``"mm/h"``.
    """

    cells: np.ndarray
    units: str = "m"

    def __post_init__(self) -> None:
        arr = np.asarray(self.cells, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise RasterError(f"raster must be a non-empty 2-D grid, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise RasterError("raster contains non-finite values")
        if len(self.units.encode("ascii")) > 8:
            raise RasterError(f"units tag {self.units!r} longer than 8 bytes")
        object.__setattr__(self, "cells", _frozen(arr))

    @property
    def rows(self) -> int:
        return self.cells.shape[0]

    @property
    def cols(self) -> int:
        return self.cells.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Raster):
            return NotImplemented
        return self.units == other.units and np.array_equal(self.cells, other.cells)

    def __hash__(self) -> int:
        return hash((self.shape, self.units, self.cells.tobytes()))


@dataclass(frozen=True, eq=False)
class CatchmentMask:
    inside: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.inside, dtype=bool)
        if arr.ndim != 2:
            raise RasterError(f"mask must be 2-D, got shape {arr.shape}")
        if not arr.any():
            raise EmptyCatchmentError("catchment mask has no inside cell")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "inside", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.inside.shape

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CatchmentMask):
            return NotImplemented
        return np.array_equal(self.inside, other.inside)

    def __hash__(self) -> int:
        return hash(self.inside.tobytes())


@dataclass(frozen=True)
class RasterStack:
    """Ordered channels sharing one grid."""

    channels: np.ndarray
    labels: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        arr = np.asarray(self.channels, dtype=np.float64)
        if arr.ndim != 3:
            raise RasterError(f"stack must be (channels, rows, cols), got {arr.shape}")
        labels = tuple(self.labels)
        if len(labels) != arr.shape[0]:
            raise RasterError(f"{len(labels)} labels for {arr.shape[0]} channels")
        if len(set(labels)) != len(labels):
            raise RasterError("channel labels must be unique")
        object.__setattr__(self, "channels", _frozen(arr))
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.channels.shape[0]

    def __getitem__(self, label: str) -> Raster:
        return Raster(self.channels[self.labels.index(label)])

    @classmethod
    def from_rasters(cls, rasters: Sequence[Raster], labels: Sequence[str]) -> "RasterStack":
        shapes = {r.shape for r in rasters}
        if len(shapes) > 1:
            raise RasterError(f"channels differ in shape: {sorted(shapes)}")
        return cls(np.stack([r.cells for r in rasters]), tuple(labels))


def mask_from_dem(dem: Raster) -> CatchmentMask:
    """Cells with elevation exactly 0.0 are outside the catchment."""
    inside = dem.cells != 0.0
    if not inside.any():
        raise EmptyCatchmentError("DEM is all zero: empty catchment")
    return CatchmentMask(inside)


def _units_tag(units: str) -> bytes:
    return units.encode("ascii").ljust(8, b"\0")


def write_raster(raster: Raster, path: str | Path) -> None:
    cells = np.asarray(raster.cells, dtype="<f8")
    if not np.all(np.isfinite(cells)):
        raise RasterError(f"refusing to write non-finite raster to {path}")
    header = _HEADER.pack(MAGIC, VERSION, raster.rows, raster.cols, _units_tag(raster.units))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(cells).tobytes())


def read_raster(path: str | Path) -> Raster:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise RasterFormatError(f"{path}: truncated header ({len(data)} bytes)")
    magic, version, rows, cols, units = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise RasterFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise RasterFormatError(f"{path}: unsupported version {version}")
    if rows < 1 or cols < 1:
        raise RasterFormatError(f"{path}: invalid dimensions {rows}x{cols}")
    payload = data[_HEADER.size:]
    expected = rows * cols * 8
    if len(payload) != expected:
        raise RasterCorruptionError(
            f"{path}: header says {rows}x{cols} ({expected} bytes), payload has {len(payload)} bytes"
        )
    cells = np.frombuffer(payload, dtype="<f8").reshape(rows, cols)
    return Raster(cells, units.rstrip(b"\0").decode("ascii"))


def write_stack(channels: np.ndarray, path: str | Path, units: str = "") -> None:
    """Write a (channels, rows, cols) float64 array."""
    arr = np.asarray(channels, dtype="<f8")
    if arr.ndim != 3:
        raise RasterError(f"stack must be 3-D, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise RasterError(f"refusing to write non-finite stack to {path}")
    n, rows, cols = arr.shape
    header = _STACK_HEADER.pack(STACK_MAGIC, VERSION, rows, cols, n, _units_tag(units))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_stack(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _STACK_HEADER.size:
        raise RasterFormatError(f"{path}: truncated header")
    magic, version, rows, cols, n, _units = _STACK_HEADER.unpack_from(data)
    if magic != STACK_MAGIC or version != VERSION:
        raise RasterFormatError(f"{path}: not a version-{VERSION} stack file")
    payload = data[_STACK_HEADER.size:]
    if len(payload) != n * rows * cols * 8:
        raise RasterCorruptionError(f"{path}: payload does not match {n}x{rows}x{cols}")
    return np.frombuffer(payload, dtype="<f8").reshape(n, rows, cols).copy()


def frame_path(dataset: str | Path, event: str, index: int) -> Path:
    return Path(dataset) / event / f"wd_t{index}.rst"


def dem_path(dataset: str | Path) -> Path:
    return Path(dataset) / "dem.rst"
