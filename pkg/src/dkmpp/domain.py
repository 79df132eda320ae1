"""Domain types and file ingestion: observation window, event sequences,
covariate grids, representative points, and dataset splitting.

Events live in a 3-D window T x X = [t_min, t_max] x [x1_min, x1_max] x
[x2_min, x2_max].  All file formats are plain CSV with numbers printed at
12 significant digits.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DataFormatError, GridError, WindowError

# Canonical normalized window: 10 time units by a unit square.
CANONICAL_BOUNDS = (0.0, 10.0, 0.0, 1.0, 0.0, 1.0)

FLOAT_FMT = "%.12g"


def fmt(x: float) -> str:
    """Format a number with 12 significant digits (the package-wide contract)."""
    return FLOAT_FMT % float(x)


@dataclass(frozen=True)
class Window:
    """Observation domain T x X with axis order (t, x1, x2)."""

    t_min: float = 0.0
    t_max: float = 10.0
    x1_min: float = 0.0
    x1_max: float = 1.0
    x2_min: float = 0.0
    x2_max: float = 1.0

    def __post_init__(self):
        for lo, hi, name in self.axes():
            if not (hi > lo):
                raise WindowError(f"window axis {name}: max {hi} must exceed min {lo}")

    def axes(self):
        return (
            (self.t_min, self.t_max, "t"),
            (self.x1_min, self.x1_max, "x1"),
            (self.x2_min, self.x2_max, "x2"),
        )

    @property
    def lows(self) -> np.ndarray:
        return np.array([self.t_min, self.x1_min, self.x2_min])

    @property
    def highs(self) -> np.ndarray:
        return np.array([self.t_max, self.x1_max, self.x2_max])

    def volume(self) -> float:
        return float(np.prod(self.highs - self.lows))

    def contains(self, point) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(p >= self.lows) and np.all(p <= self.highs))


@dataclass(frozen=True)
class EventSequence:
    """One realization: events (t, x1, x2) sorted by t, unique timestamps."""

    seq_id: str
    events: np.ndarray  # shape (n, 3)

    def __post_init__(self):
        ev = np.asarray(self.events, dtype=np.float64).reshape(-1, 3)
        ev.setflags(write=False)
        object.__setattr__(self, "events", ev)
        t = ev[:, 0]
        if t.size and np.any(np.diff(t) <= 0):
            bad = int(np.argmax(np.diff(t) <= 0))
            if t[bad + 1] == t[bad]:
                raise DataFormatError(
                    f"sequence {self.seq_id!r}: duplicate timestamp t={fmt(t[bad])}"
                )
            raise DataFormatError(f"sequence {self.seq_id!r}: events not sorted by t")

    def __len__(self) -> int:
        return self.events.shape[0]

    @property
    def first_time(self) -> float:
        """Time of the first event; +inf for an empty sequence (sorts last)."""
        return float(self.events[0, 0]) if len(self) else math.inf


@dataclass(frozen=True)
class SequenceSet:
    """A dataset: a list of sequences observed on a common window."""

    sequences: tuple
    window: Window

    @property
    def n_sequences(self) -> int:
        return len(self.sequences)

    @property
    def n_events(self) -> int:
        return sum(len(s) for s in self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def __len__(self):
        return len(self.sequences)

    def all_events(self) -> np.ndarray:
        """Concatenated (n_events, 3) array in sequence order."""
        if not self.sequences:
            return np.zeros((0, 3))
        return np.concatenate([s.events for s in self.sequences], axis=0)

    def subset(self, indices) -> "SequenceSet":
        return SequenceSet(tuple(self.sequences[i] for i in indices), self.window)


def make_sequence_set(groups: dict, window: Window) -> SequenceSet:
    """Build a SequenceSet from {seq_id: iterable of (t, x1, x2)} with sorting."""
    seqs = []
    for sid, rows in groups.items():
        ev = np.asarray(list(rows), dtype=np.float64).reshape(-1, 3)
        order = np.argsort(ev[:, 0], kind="stable")
        seqs.append(EventSequence(str(sid), ev[order]))
    return SequenceSet(tuple(seqs), window)


def load_sequences(path, window: Window) -> SequenceSet:
    """Load an events CSV (header seq_id,t,x1,x2) into a SequenceSet.

    Events are grouped by seq_id and sorted ascending by t within each
    sequence.  Raises DataFormatError for malformed rows (with the row
    number), WindowError for out-of-window events, and DataFormatError for
    duplicate (seq_id, t) pairs.
    """
    groups: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != ["seq_id", "t", "x1", "x2"]:
            raise DataFormatError(f"{path}: expected header seq_id,t,x1,x2, got {header}")
        for rownum, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 4:
                raise DataFormatError(f"{path}: row {rownum}: expected 4 fields, got {len(row)}")
            sid = row[0].strip()
            try:
                point = tuple(float(v) for v in row[1:])
            except ValueError as exc:
                raise DataFormatError(f"{path}: row {rownum}: non-numeric field ({exc})") from exc
            if not all(math.isfinite(v) for v in point):
                raise DataFormatError(f"{path}: row {rownum}: non-finite value")
            if not window.contains(point):
                raise WindowError(
                    f"{path}: row {rownum}: event {point} outside window for sequence {sid!r}"
                )
            groups.setdefault(sid, []).append(point)
    return make_sequence_set(groups, window)


def write_sequences(data: SequenceSet, path) -> None:
    """Write a SequenceSet as an events CSV (12 significant digits)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seq_id", "t", "x1", "x2"])
        for seq in data:
            for t, x1, x2 in seq.events:
                writer.writerow([seq.seq_id, fmt(t), fmt(x1), fmt(x2)])


@dataclass(frozen=True)
class CovariateGrid:
    """K-dimensional covariates sampled on a regular (t, x1, x2) grid.

    values has shape (len(t_knots), len(x1_knots), len(x2_knots), K).
    """

    t_knots: np.ndarray
    x1_knots: np.ndarray
    x2_knots: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        for name in ("t_knots", "x1_knots", "x2_knots"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 1 or arr.size == 0:
                raise GridError(f"{name}: need a non-empty 1-D knot list")
            if arr.size > 1 and np.any(np.diff(arr) <= 0):
                raise GridError(f"{name}: knots must be strictly increasing")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        vals = np.asarray(self.values, dtype=np.float64)
        expect = (self.t_knots.size, self.x1_knots.size, self.x2_knots.size)
        if vals.ndim != 4 or vals.shape[:3] != expect:
            raise GridError(f"values shape {vals.shape} does not match knots {expect} x K")
        if not np.all(np.isfinite(vals)):
            raise GridError("covariate values must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def K(self) -> int:
        return self.values.shape[3]

    def nearest_indices(self, points: np.ndarray) -> tuple:
        """Per-axis nearest-knot indices; equidistant ties go to the lower index."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        idx = []
        for d, knots in enumerate((self.t_knots, self.x1_knots, self.x2_knots)):
            # searchsorted('left') against midpoints sends exact-midpoint
            # queries to the lower knot.
            mids = 0.5 * (knots[:-1] + knots[1:])
            idx.append(np.searchsorted(mids, pts[:, d], side="left"))
        return tuple(idx)

    def lookup(self, points: np.ndarray) -> np.ndarray:
        """Covariate vectors at the per-axis nearest knots of each point."""
        it, i1, i2 = self.nearest_indices(points)
        return self.values[it, i1, i2, :]


def load_covariate_grid(path) -> CovariateGrid:
    """Load a covariate CSV (header t,x1,x2,z0..z{K-1}) into a CovariateGrid.

    Rows must enumerate the full Cartesian product of the axis knots.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 4 or [c.strip() for c in header[:3]] != ["t", "x1", "x2"]:
            raise DataFormatError(f"{path}: expected header t,x1,x2,z0..., got {header}")
        K = len(header) - 3
        for k in range(K):
            if header[3 + k].strip() != f"z{k}":
                raise DataFormatError(f"{path}: covariate column {3 + k} must be named z{k}")
        coords = []
        zs = []
        for rownum, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3 + K:
                raise DataFormatError(f"{path}: row {rownum}: expected {3 + K} fields")
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                raise DataFormatError(f"{path}: row {rownum}: non-numeric field ({exc})") from exc
            if not all(math.isfinite(v) for v in vals):
                raise GridError(f"{path}: row {rownum}: non-finite value")
            coords.append(vals[:3])
            zs.append(vals[3:])
    if not coords:
        raise GridError(f"{path}: empty covariate grid")
    coords = np.asarray(coords)
    zs = np.asarray(zs)
    knots = [np.unique(coords[:, d]) for d in range(3)]
    n_expected = knots[0].size * knots[1].size * knots[2].size
    if coords.shape[0] != n_expected:
        raise GridError(
            f"{path}: incomplete grid: {coords.shape[0]} rows for "
            f"{knots[0].size}x{knots[1].size}x{knots[2].size} knots"
        )
    values = np.zeros((knots[0].size, knots[1].size, knots[2].size, K))
    seen = np.zeros(values.shape[:3], dtype=bool)
    it = np.searchsorted(knots[0], coords[:, 0])
    i1 = np.searchsorted(knots[1], coords[:, 1])
    i2 = np.searchsorted(knots[2], coords[:, 2])
    values[it, i1, i2, :] = zs
    seen[it, i1, i2] = True
    if not seen.all():
        raise GridError(f"{path}: duplicate rows leave grid cells unfilled")
    return CovariateGrid(knots[0], knots[1], knots[2], values)


def write_covariate_grid(grid: CovariateGrid, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "x1", "x2"] + [f"z{k}" for k in range(grid.K)])
        for i, t in enumerate(grid.t_knots):
            for j, x1 in enumerate(grid.x1_knots):
                for l, x2 in enumerate(grid.x2_knots):
                    row = [fmt(t), fmt(x1), fmt(x2)]
                    row += [fmt(v) for v in grid.values[i, j, l]]
                    writer.writerow(row)


@dataclass(frozen=True)
class RepresentativeSet:
    """Evenly spaced anchor points u_j with their looked-up covariates Z(u_j)."""

    points: np.ndarray      # (J, 3)
    covariates: np.ndarray  # (J, K)
    counts: tuple           # (J_t, J_x1, J_x2)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        cov = np.asarray(self.covariates, dtype=np.float64)
        cov = cov.reshape(pts.shape[0], -1)
        if pts.shape[0] != int(np.prod(self.counts)):
            raise GridError("representative point count does not match per-axis counts")
        pts.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "covariates", cov)

    @property
    def J(self) -> int:
        return self.points.shape[0]

    @property
    def K(self) -> int:
        return self.covariates.shape[1]


def _axis_values(lo: float, hi: float, count: int) -> np.ndarray:
    if count < 1:
        raise GridError(f"per-axis representative count must be >= 1, got {count}")
    if count == 1:
        return np.array([0.5 * (lo + hi)])
    return np.linspace(lo, hi, count)


def representative_points(window: Window, counts) -> np.ndarray:
    """Cartesian product of per-axis evenly spaced values spanning the window."""
    axes = [
        _axis_values(lo, hi, int(c))
        for (lo, hi, _), c in zip(window.axes(), counts)
    ]
    return np.array(list(itertools.product(*axes)), dtype=np.float64)


def build_representative_set(window: Window, counts, grid: CovariateGrid) -> RepresentativeSet:
    """Place the representative grid and attach nearest-knot covariates."""
    pts = representative_points(window, counts)
    cov = grid.lookup(pts)
    return RepresentativeSet(pts, cov, tuple(int(c) for c in counts))


def split_by_time(data: SequenceSet, ratios=(0.5, 0.4, 0.1)):
    """Split sequences into contiguous blocks ordered by first event time.

    Block sizes are floor(n * ratio) with the remainder assigned to the last
    split.  Empty sequences sort last (first_time = +inf).
    """
    ratios = tuple(float(r) for r in ratios)
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be positive and sum to 1, got {ratios}")
    n = data.n_sequences
    if n < len(ratios):
        raise ValueError(f"cannot split {n} sequences into {len(ratios)} parts")
    order = sorted(range(n), key=lambda i: (data.sequences[i].first_time, i))
    sizes = [int(math.floor(n * r)) for r in ratios[:-1]]
    sizes.append(n - sum(sizes))
    out = []
    start = 0
    for size in sizes:
        out.append(data.subset(order[start:start + size]))
        start += size
    return tuple(out)


@dataclass(frozen=True)
class AffineMap:
    """Per-axis affine map new = scale * old + offset, with its inverse."""

    scale: np.ndarray
    offset: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) * self.scale + self.offset

    def invert(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.offset) / self.scale


def normalize_to_canonical(data: SequenceSet) -> tuple:
    """Rescale a dataset onto the canonical [0,10] x [0,1] x [0,1] window.

    Returns (normalized SequenceSet, AffineMap).  The map is stored so raw
    coordinates can be recovered.
    """
    src = data.window
    lo_c = np.array([CANONICAL_BOUNDS[0], CANONICAL_BOUNDS[2], CANONICAL_BOUNDS[4]])
    hi_c = np.array([CANONICAL_BOUNDS[1], CANONICAL_BOUNDS[3], CANONICAL_BOUNDS[5]])
    scale = (hi_c - lo_c) / (src.highs - src.lows)
    offset = lo_c - src.lows * scale
    amap = AffineMap(scale, offset)
    window = Window(*(b for b in CANONICAL_BOUNDS))
    seqs = tuple(
        EventSequence(s.seq_id, np.clip(amap.apply(s.events), lo_c, hi_c))
        for s in data
    )
    return SequenceSet(seqs, window), amap
