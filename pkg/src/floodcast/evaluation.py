"""Depth-bucketed, sigma-normalised error metric and box-plot reports.

For a ground-truth depth ``y`` in bucket ``b`` and a prediction ``p`` the
per-cell score is ``M = |y - p| / sigma_b``, where ``sigma_b`` is the
population standard deviation of all ground truths in that bucket. Scores
below 1 mean the model beats guessing the bucket mean on typical cells.
"""

from __future__ import annotations

import csv
import html
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import Dataset, FeatureRangeError, FeatureSpec, assemble
from .models import Model, predict_arrays

BUCKET_EDGES = (0.0, 0.10, 0.20, 0.50, 1.00)


class DegenerateBucketWarning(UserWarning):
    pass


@dataclass(frozen=True)
class BucketSpec:
    """Lower bucket edges in metres; the last bucket is open-ended."""

    edges: tuple[float, ...] = BUCKET_EDGES

    def __post_init__(self) -> None:
        if len(self.edges) < 1 or any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise ValueError(f"bucket edges must be strictly increasing: {self.edges}")

    @property
    def n_buckets(self) -> int:
        return len(self.edges)

    def label(self, bucket: int) -> str:
        lo = self.edges[bucket - 1]
        if bucket == self.n_buckets:
            return f">={lo * 100:g}cm"
        return f"{lo * 100:g}-{self.edges[bucket] * 100:g}cm"


def bucketize(truths: np.ndarray, mask: np.ndarray | None = None, spec: BucketSpec = BucketSpec()) -> np.ndarray:
    """1-based bucket per cell from half-open intervals; 0 marks excluded cells.

    Depths below the first edge fall in bucket 1.
    """
    truths = np.asarray(truths, dtype=np.float64)
    buckets = np.searchsorted(np.asarray(spec.edges[1:]), truths, side="right") + 1
    if mask is not None:
        buckets = np.where(np.asarray(mask, dtype=bool), buckets, 0)
    return buckets


def bucket_sigma(truths: np.ndarray, buckets: np.ndarray, bucket: int) -> float:
    members = truths[buckets == bucket]
    return float(members.std()) if members.size else 0.0


def metric(preds: np.ndarray, truths: np.ndarray, buckets: np.ndarray) -> dict[int, np.ndarray]:
    """Per-cell ``M`` grouped by bucket.

    Buckets with fewer than two members or zero spread are left out with a
    :class:`DegenerateBucketWarning`.
    """
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if preds.shape != truths.shape or buckets.shape != truths.shape:
        raise ValueError(f"shape mismatch: preds {preds.shape}, truths {truths.shape}, buckets {buckets.shape}")
    out = {}
    for b in np.unique(buckets[buckets > 0]):
        sel = buckets == b
        sigma = float(truths[sel].std())
        if sel.sum() < 2 or sigma == 0.0:
            warnings.warn(f"bucket {b} is degenerate (n={int(sel.sum())}, sigma={sigma}); excluded",
                          DegenerateBucketWarning, stacklevel=2)
            continue
        out[int(b)] = np.abs(truths[sel] - preds[sel]) / sigma
    return out


@dataclass
class BucketStats:
    bucket: int
    label: str
    count: int
    sigma: float | None
    degenerate: bool = False
    median: float | None = None
    q1: float | None = None
    q3: float | None = None
    whisker_lo: float | None = None
    whisker_hi: float | None = None
    mean: float | None = None
    spill: str | None = None

    @classmethod
    def from_values(cls, bucket: int, label: str, values: np.ndarray | None, count: int,
                    sigma: float | None) -> "BucketStats":
        if values is None or values.size == 0:
            return cls(bucket, label, count, sigma, degenerate=True)
        q1, med, q3 = (float(v) for v in np.percentile(values, [25, 50, 75]))
        iqr = q3 - q1
        inner = values[(values >= q1 - 1.5 * iqr) & (values <= q3 + 1.5 * iqr)]
        return cls(bucket, label, count, sigma, False, med, q1, q3,
                   float(inner.min()), float(inner.max()), float(values.mean()))


@dataclass
class BucketReport:
    model: str
    event: str
    stats: list[BucketStats]
    values: dict[int, np.ndarray] = field(repr=False, default_factory=dict)

    @property
    def n_cells(self) -> int:
        return sum(s.count for s in self.stats)

    def median(self, bucket: int) -> float | None:
        return self.stats[bucket - 1].median

    def summary(self) -> dict:
        return {
            "model": self.model,
            "event": self.event,
            "n_cells": self.n_cells,
            "buckets": [{k: v for k, v in vars(s).items() if k != "spill"} for s in self.stats],
        }


def report_from_arrays(model: str, event: str, preds: np.ndarray, truths: np.ndarray,
                       spec: BucketSpec = BucketSpec()) -> BucketReport:
    """Report over flat arrays of inside-mask predictions and truths."""
    buckets = bucketize(truths, spec=spec)
    values = metric(preds, truths, buckets)
    stats = []
    for b in range(1, spec.n_buckets + 1):
        count = int((buckets == b).sum())
        sigma = bucket_sigma(truths, buckets, b) if count else None
        stats.append(BucketStats.from_values(b, spec.label(b), values.get(b), count, sigma))
    return BucketReport(model, event, stats, values)


def pool_reports(reports: Sequence[BucketReport], event: str = "pooled") -> BucketReport:
    """Concatenate per-event M values; each event keeps its own sigma."""
    if not reports:
        raise ValueError("no reports to pool")
    n = len(reports[0].stats)
    stats = []
    values = {}
    for b in range(1, n + 1):
        parts = [r.values[b] for r in reports if b in r.values]
        vals = np.concatenate(parts) if parts else None
        if vals is not None:
            values[b] = vals
        count = sum(r.stats[b - 1].count for r in reports)
        stats.append(BucketStats.from_values(b, reports[0].stats[b - 1].label, vals, count, None))
    return BucketReport(reports[0].model, event, stats, values)


# --------------------------------------------------------------------------- #
# Full-raster evaluation with overlapping tiles
# --------------------------------------------------------------------------- #

def tile_starts(n: int, size: int) -> list[int]:
    """Tile origins covering ``[0, n)`` with roughly half-tile overlap."""
    if size >= n:
        return [0]
    starts = list(range(0, n - size + 1, max(1, size // 2)))
    if starts[-1] != n - size:
        starts.append(n - size)
    return starts


def tile_ownership(starts: Sequence[int], size: int, n: int) -> list[tuple[int, int]]:
    """Half-open ranges each tile writes: overlaps are split at their midpoint."""
    cuts = [0] + [(starts[i - 1] + size + starts[i]) // 2 for i in range(1, len(starts))] + [n]
    return [(cuts[i], cuts[i + 1]) for i in range(len(starts))]


def predict_event(
    model: Model,
    dataset: Dataset,
    event: str,
    horizon: int,
    patch_size: int,
    batch_size: int = 16,
) -> tuple[np.ndarray, np.ndarray]:
    """Predicted depth at ``t + horizon`` for every valid anchor ``t``.

    Returns ``(anchors, depths)`` with depths shaped (anchors, rows, cols).
    Rasters larger than ``patch_size`` are covered by overlapping tiles whose
    central parts are stitched together, so every cell comes from the tile in
    which it sits furthest from the edge.
    """
    ev = dataset.events[event]
    fspec = FeatureSpec(T=model.fspec.T, H=horizon, patch_size=patch_size)
    anchors = np.asarray(ev.anchors(fspec))
    if anchors.size == 0:
        raise FeatureRangeError(f"event {event} has {ev.n_frames} frames, too few for T={fspec.T}, H={horizon}")
    rows, cols = dataset.dem.shape
    size_r, size_c = min(patch_size, rows), min(patch_size, cols)
    rs, cs = tile_starts(rows, size_r), tile_starts(cols, size_c)
    own_r, own_c = tile_ownership(rs, size_r, rows), tile_ownership(cs, size_c, cols)
    delta = np.zeros((anchors.size, rows, cols))
    jobs = [(a, i, j) for a in range(anchors.size) for i in range(len(rs)) for j in range(len(cs))]
    samples = {}
    for lo in range(0, len(jobs), batch_size):
        chunk = jobs[lo:lo + batch_size]
        static, rain, depths = [], [], []
        for a, i, j in chunk:
            if a not in samples:
                samples = {a: assemble(dataset.dem, dataset.mask, ev.depths, ev.event, int(anchors[a]), fspec,
                                       static=dataset.static)}
            s = samples[a]
            sl = (slice(None), slice(rs[i], rs[i] + size_r), slice(cs[j], cs[j] + size_c))
            static.append(s.static[sl])
            rain.append(s.rain)
            depths.append(s.depths[sl])
        out = predict_arrays(model, np.stack(static), np.stack(rain), np.stack(depths), horizon)
        for k, (a, i, j) in enumerate(chunk):
            (r0, r1), (c0, c1) = own_r[i], own_c[j]
            delta[a, r0:r1, c0:c1] = out[k, r0 - rs[i]:r1 - rs[i], c0 - cs[j]:c1 - cs[j]]
    current = ev.depths[anchors]
    return anchors, np.maximum(current + delta, 0.0)


def evaluate_event(
    model: Model,
    dataset: Dataset,
    event: str,
    horizon: int,
    patch_size: int,
    bucket_spec: BucketSpec = BucketSpec(),
    name: str | None = None,
    batch_size: int = 16,
) -> BucketReport:
    """Score every (inside cell, anchor) pair of one event, pooled per bucket."""
    anchors, preds = predict_event(model, dataset, event, horizon, patch_size, batch_size)
    inside = np.asarray(dataset.mask.inside)
    truths = dataset.events[event].depths[anchors + horizon]
    return report_from_arrays(name or model.spec.label, event, preds[:, inside].ravel(),
                              truths[:, inside].ravel(), bucket_spec)


# --------------------------------------------------------------------------- #
# Rendering
# --------------------------------------------------------------------------- #

CSV_COLUMNS = ("model", "bucket", "count", "median", "q1", "q3", "whisker_lo", "whisker_hi",
               "event", "sigma", "mean", "spill")
_PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c")


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text)


def write_spills(reports: Sequence[BucketReport], directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for r in reports:
        for s in r.stats:
            if s.bucket in r.values:
                path = directory / f"{_slug(r.model)}__{_slug(r.event)}__b{s.bucket}.npy"
                np.save(path, r.values[s.bucket])
                s.spill = str(path.relative_to(directory.parent))


def _fmt(v) -> str:
    return "" if v is None else repr(v) if isinstance(v, float) else str(v)


def render_report(reports: Sequence[BucketReport], out_dir: str | Path, name: str = "report",
                  title: str = "") -> tuple[Path, Path]:
    """Write ``<name>.csv``, ``<name>.svg`` and raw M values under ``spill/``."""
    if not reports:
        raise ValueError("render_report needs at least one report")
    out_dir = Path(out_dir)
    write_spills(reports, out_dir / "spill")
    csv_path = out_dir / f"{name}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in reports:
            for s in r.stats:
                row = dict(vars(s), model=r.model, event=r.event)
                writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    svg_path = out_dir / f"{name}.svg"
    svg_path.write_text(box_plot_svg(reports, title or name))
    return csv_path, svg_path


def box_plot_svg(reports: Sequence[BucketReport], title: str = "") -> str:
    """Grouped box plots, one group per bucket, one box per report.

    Outliers beyond the whiskers are not drawn. A dashed line marks M = 1.
    """
    n_buckets = len(reports[0].stats)
    width, height = 140 + 150 * n_buckets, 420
    left, right, top, bottom = 60, 130, 40, 60
    plot_w, plot_h = width - left - right, height - top - bottom
    highs = [s.whisker_hi for r in reports for s in r.stats if s.whisker_hi is not None]
    ymax = max([1.2] + highs)
    ymax = float(np.ceil(ymax * 5) / 5)

    def ypos(v: float) -> float:
        return top + plot_h * (1.0 - v / ymax)

    group_w = plot_w / n_buckets
    box_w = min(24.0, 0.8 * group_w / len(reports))
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="sans-serif" font-size="11">',
             f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="13">{html.escape(title)}</text>',
             f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
             f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>']
    n_ticks = 5
    for k in range(n_ticks + 1):
        v = ymax * k / n_ticks
        parts.append(f'<text x="{left - 6}" y="{ypos(v) + 4:.1f}" text-anchor="end">{v:.2f}</text>')
    parts.append(f'<text x="16" y="{top + plot_h / 2}" transform="rotate(-90 16 {top + plot_h / 2})" '
                 f'text-anchor="middle">M</text>')
    for b in range(n_buckets):
        gx = left + b * group_w
        label = reports[0].stats[b].label
        parts.append(f'<text x="{gx + group_w / 2:.1f}" y="{top + plot_h + 18}" text-anchor="middle">'
                     f'{html.escape(label)}</text>')
        x0 = gx + (group_w - box_w * len(reports)) / 2
        for m, r in enumerate(reports):
            s = r.stats[b]
            if s.median is None:
                continue
            color = _PALETTE[m % len(_PALETTE)]
            x = x0 + m * box_w
            cx = x + box_w / 2
            parts.append(f'<line x1="{cx:.1f}" y1="{ypos(s.whisker_lo):.1f}" x2="{cx:.1f}" '
                         f'y2="{ypos(s.whisker_hi):.1f}" stroke="{color}"/>')
            parts.append(f'<rect class="box" x="{x + 2:.1f}" y="{ypos(s.q3):.1f}" width="{box_w - 4:.1f}" '
                         f'height="{max(ypos(s.q1) - ypos(s.q3), 0.5):.1f}" fill="{color}" fill-opacity="0.6" '
                         f'stroke="{color}"/>')
            parts.append(f'<line class="median" x1="{x + 2:.1f}" y1="{ypos(s.median):.1f}" x2="{x + box_w - 2:.1f}" '
                         f'y2="{ypos(s.median):.1f}" stroke="black" stroke-width="2"/>')
    parts.append(f'<line id="reference-line" class="reference" x1="{left}" y1="{ypos(1.0):.1f}" '
                 f'x2="{left + plot_w}" y2="{ypos(1.0):.1f}" stroke="red" stroke-dasharray="6 4" data-m="1"/>')
    for m, r in enumerate(reports):
        y = top + 14 * m
        color = _PALETTE[m % len(_PALETTE)]
        parts.append(f'<rect x="{left + plot_w + 10}" y="{y}" width="10" height="10" fill="{color}"/>')
        parts.append(f'<text x="{left + plot_w + 24}" y="{y + 9}">{html.escape(r.model)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
