"""Multi-type point patterns, observation windows, masks and gridding.

Grid layout convention used throughout the package: fields live on the
extended (torus) grid as ``(Me, Ne)`` arrays; the interior ``M x N`` block
occupies rows ``0..M-1`` and columns ``0..N-1``. Row 0 is the bottom row
(``y_min``), column 0 the left column (``x_min``). Mask rasters on disk use
image orientation (row 0 = top) and are flipped on load.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class PatternError(ValueError):
    """Raised for malformed or inconsistent point-pattern input."""


@dataclass(frozen=True)
class Window:
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise PatternError(f"degenerate window {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def contains(self, x, y):
        x = np.asarray(x)
        y = np.asarray(y)
        return (x >= self.x_min) & (x <= self.x_max) & (y >= self.y_min) & (y <= self.y_max)

    def shifted(self, dx: float, dy: float) -> "Window":
        return Window(self.x_min + dx, self.x_max + dx, self.y_min + dy, self.y_max + dy)


@dataclass(frozen=True, eq=False)
class PointPattern:
    """Points of ``J`` types inside a rectangular window.

    ``type_index``, ``x`` and ``y`` are parallel arrays; ``types`` holds the
    labels in first-appearance order.
    """

    window: Window
    types: tuple[str, ...]
    type_index: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.types) < 1:
            raise PatternError("a pattern needs at least one type")
        ti = np.asarray(self.type_index, dtype=np.int64)
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if not (ti.shape == x.shape == y.shape) or ti.ndim != 1:
            raise PatternError("type_index, x and y must be 1-d and equally long")
        if ti.size and (ti.min() < 0 or ti.max() >= len(self.types)):
            raise PatternError("type index out of range")
        outside = ~self.window.contains(x, y)
        if outside.any():
            i = int(np.flatnonzero(outside)[0])
            raise PatternError(f"point {i} at ({x[i]}, {y[i]}) lies outside the window")
        object.__setattr__(self, "type_index", ti)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def J(self) -> int:
        return len(self.types)

    @property
    def counts(self) -> np.ndarray:
        """Number of points per type (``G_j``)."""
        return np.bincount(self.type_index, minlength=self.J)

    def shifted(self, dx: float, dy: float) -> "PointPattern":
        return PointPattern(self.window.shifted(dx, dy), self.types, self.type_index,
                            self.x + dx, self.y + dy)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["type", "x", "y"])
            for t, xv, yv in zip(self.type_index, self.x, self.y):
                w.writerow([self.types[t], repr(float(xv)), repr(float(yv))])


def load_pattern(path, format: str = "csv", window: Window | None = None) -> PointPattern:
    """Read a ``type,x,y`` CSV export of cell centroids.

    If ``window`` is None the bounding box of the points is used.
    """
    if format != "csv":
        raise PatternError(f"unsupported format {format!r}")
    path = Path(path)
    labels: list[str] = []
    lookup: dict[str, int] = {}
    ti, xs, ys = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PatternError(f"{path}: empty file, expected header 'type,x,y'") from None
        header = [h.strip().lower() for h in header]
        try:
            cols = [header.index("type"), header.index("x"), header.index("y")]
        except ValueError:
            raise PatternError(f"{path}: header must contain type,x,y (got {header})") from None
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                label = row[cols[0]].strip()
                xv = float(row[cols[1]])
                yv = float(row[cols[2]])
            except (IndexError, ValueError) as exc:
                raise PatternError(f"{path}:{lineno}: malformed row {row!r} ({exc})") from None
            if not label or not np.isfinite(xv) or not np.isfinite(yv):
                raise PatternError(f"{path}:{lineno}: malformed row {row!r}")
            if label not in lookup:
                lookup[label] = len(labels)
                labels.append(label)
            ti.append(lookup[label])
            xs.append(xv)
            ys.append(yv)
    if not ti:
        raise PatternError(f"{path}: no points")
    xs = np.array(xs)
    ys = np.array(ys)
    if window is None:
        window = Window(xs.min(), xs.max(), ys.min(), ys.max())
    return PointPattern(window, tuple(labels), np.array(ti), xs, ys)


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


@dataclass(frozen=True)
class GridSpec:
    """Interior ``M x N`` computational grid and its ``Me x Ne`` torus extension."""

    window: Window
    M: int
    N: int
    Me: int
    Ne: int

    @property
    def cell_width(self) -> float:
        return self.window.width / self.N

    @property
    def cell_height(self) -> float:
        return self.window.height / self.M

    @property
    def cell_area(self) -> float:
        return self.cell_width * self.cell_height

    @property
    def shape(self) -> tuple[int, int]:
        return (self.Me, self.Ne)

    @property
    def size(self) -> int:
        return self.Me * self.Ne

    def centroids(self) -> np.ndarray:
        """Cell centroids on the extended grid, shape ``(Me, Ne, 2)``."""
        cx = self.window.x_min + (np.arange(self.Ne) + 0.5) * self.cell_width
        cy = self.window.y_min + (np.arange(self.Me) + 0.5) * self.cell_height
        X, Y = np.meshgrid(cx, cy)
        return np.stack([X, Y], axis=-1)


def make_grid(window: Window, M: int, N: int) -> GridSpec:
    """Interior grid plus the smallest power-of-two torus with ``Me >= 2(M-1)``."""
    if M < 2 or N < 2:
        raise PatternError("grid needs M, N >= 2")
    return GridSpec(window, int(M), int(N), _next_pow2(2 * (M - 1)), _next_pow2(2 * (N - 1)))


@dataclass(frozen=True, eq=False)
class GriddedData:
    """Counts and areas on the extended grid.

    ``counts`` has shape ``(J, Me, Ne)``; ``areas`` and ``mask`` are
    ``(Me, Ne)``. Exterior and masked cells have area 0 and ``mask=False``.
    ``dropped`` records, per type, points discarded because they fell in
    masked cells.
    """

    spec: GridSpec
    types: tuple[str, ...]
    counts: np.ndarray
    areas: np.ndarray
    mask: np.ndarray
    dropped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def J(self) -> int:
        return self.counts.shape[0]

    @property
    def centroids(self) -> np.ndarray:
        return self.spec.centroids()

    @property
    def interior_counts(self) -> np.ndarray:
        return self.counts[:, : self.spec.M, : self.spec.N]

    @property
    def interior_areas(self) -> np.ndarray:
        return self.areas[: self.spec.M, : self.spec.N]

    @property
    def observed_area(self) -> float:
        return float(self.areas.sum())


def load_mask(path, M: int, N: int) -> np.ndarray:
    """Read an ``M x N`` 0/1 raster (1 = excluded, row 0 = top of image)."""
    raster = np.loadtxt(path, delimiter=",", ndmin=2)
    if raster.shape != (M, N):
        raise PatternError(f"mask raster is {raster.shape}, grid is {(M, N)}")
    if not np.isin(raster, (0, 1)).all():
        raise PatternError("mask raster must contain only 0 and 1")
    return raster.astype(bool)


def grid_bin(pattern: PointPattern, spec: GridSpec, mask_raster=None) -> GriddedData:
    """Bin points onto the interior cells of ``spec``.

    Cells are half-open ``[lo, hi)``; points on the upper window edge go to
    the last cell. ``mask_raster`` is an ``M x N`` boolean array in image
    orientation (row 0 = top) where True marks an excluded cell.
    """
    M, N = spec.M, spec.N
    w = spec.window
    col = np.floor((pattern.x - w.x_min) / spec.cell_width).astype(np.int64)
    row = np.floor((pattern.y - w.y_min) / spec.cell_height).astype(np.int64)
    np.clip(col, 0, N - 1, out=col)
    np.clip(row, 0, M - 1, out=row)

    J = pattern.J
    counts = np.zeros((J, spec.Me, spec.Ne), dtype=np.int64)
    np.add.at(counts, (pattern.type_index, row, col), 1)

    keep = np.zeros(spec.shape, dtype=bool)
    keep[:M, :N] = True
    if mask_raster is not None:
        excluded = np.asarray(mask_raster, dtype=bool)
        if excluded.shape != (M, N):
            raise PatternError(f"mask raster is {excluded.shape}, grid is {(M, N)}")
        keep[:M, :N] &= ~excluded[::-1]

    dropped = (counts * ~keep).sum(axis=(1, 2))
    if dropped.any():
        log.warning("dropped points in masked cells per type: %s",
                    dict(zip(pattern.types, dropped.tolist())))
    counts[:, ~keep] = 0
    areas = np.where(keep, spec.cell_area, 0.0)
    return GriddedData(spec, pattern.types, counts, areas, keep, dropped)
