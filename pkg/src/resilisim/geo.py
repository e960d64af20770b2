"""Planar geometry helpers: projection, nearest-neighbour grid index, patch grid."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_M = 6_371_000.0


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0) or not (-180.0 <= self.lon <= 180.0):
            raise ValueError(f"invalid coordinate ({self.lat}, {self.lon})")


@dataclass(frozen=True)
class PlanarPoint:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite planar point ({self.x}, {self.y})")


def project(p: GeoPoint, origin: GeoPoint) -> PlanarPoint:
    """Equirectangular projection of ``p`` around ``origin`` (meters east/north)."""
    x, y = project_many(np.array([p.lat]), np.array([p.lon]), origin)
    return PlanarPoint(float(x[0]), float(y[0]))


def project_many(lat, lon, origin: GeoPoint):
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    k = math.cos(math.radians(origin.lat))
    x = EARTH_RADIUS_M * np.radians(lon - origin.lon) * k
    y = EARTH_RADIUS_M * np.radians(lat - origin.lat)
    return x, y


def unproject_many(x, y, origin: GeoPoint):
    k = math.cos(math.radians(origin.lat))
    lat = origin.lat + np.degrees(np.asarray(y, dtype=float) / EARTH_RADIUS_M)
    lon = origin.lon + np.degrees(np.asarray(x, dtype=float) / (EARTH_RADIUS_M * k))
    return lat, lon


def haversine(a: GeoPoint, b: GeoPoint) -> float:
    p1, p2 = math.radians(a.lat), math.radians(b.lat)
    dp = p2 - p1
    dl = math.radians(b.lon - a.lon)
    h = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(math.sqrt(h))


class GridIndex:
    """Uniform grid hash over planar points for nearest-neighbour queries.

    Bulk-loaded once; queries search square rings of cells outward from the
    query cell and stop once no unvisited cell can hold a closer point.
    Ties are resolved toward the lowest item id.
    """

    def __init__(self, xy, cell: float = 100.0, ids=None):
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        self.cell = float(cell)
        self.n = len(xy)
        self._ids = list(range(self.n)) if ids is None else [int(i) for i in ids]
        self._xs = xy[:, 0].tolist()
        self._ys = xy[:, 1].tolist()
        self._cells: dict[tuple[int, int], list[int]] = {}
        if self.n:
            cx = np.floor(xy[:, 0] / self.cell).astype(np.int64)
            cy = np.floor(xy[:, 1] / self.cell).astype(np.int64)
            for k, key in enumerate(zip(cx.tolist(), cy.tolist())):
                self._cells.setdefault(key, []).append(k)
            self._bounds = (int(cx.min()), int(cx.max()), int(cy.min()), int(cy.max()))

    def __len__(self):
        return self.n

    def nearest(self, x: float, y: float) -> tuple[int, float]:
        """Return ``(item_id, distance)`` of the closest indexed point."""
        if self.n == 0:
            raise ValueError("nearest() on an empty index")
        cell = self.cell
        qx, qy = int(math.floor(x / cell)), int(math.floor(y / cell))
        x0, x1, y0, y1 = self._bounds
        max_ring = max(abs(qx - x0), abs(qx - x1), abs(qy - y0), abs(qy - y1))
        xs, ys, ids, cells = self._xs, self._ys, self._ids, self._cells
        best_d2 = math.inf
        best_id = -1
        best_k = -1
        r = 0
        while r <= max_ring:
            for key in _ring(qx, qy, r):
                bucket = cells.get(key)
                if bucket is None:
                    continue
                for k in bucket:
                    dx = xs[k] - x
                    dy = ys[k] - y
                    d2 = dx * dx + dy * dy
                    if d2 < best_d2 or (d2 == best_d2 and ids[k] < best_id):
                        best_d2, best_id, best_k = d2, ids[k], k
            # every point in ring r+1 lies at least r*cell away; strict so ties
            # across the ring boundary still resolve by id
            if best_k >= 0 and math.sqrt(best_d2) < r * cell:
                break
            r += 1
        return best_id, math.sqrt(best_d2)

    def within(self, x: float, y: float, radius: float) -> list[int]:
        """Item ids within ``radius`` of (x, y), sorted by id."""
        cell = self.cell
        r = int(math.ceil(radius / cell))
        qx, qy = int(math.floor(x / cell)), int(math.floor(y / cell))
        out = []
        for i in range(qx - r, qx + r + 1):
            for j in range(qy - r, qy + r + 1):
                for k in self._cells.get((i, j), ()):
                    if math.hypot(self._xs[k] - x, self._ys[k] - y) <= radius:
                        out.append(self._ids[k])
        return sorted(out)


def _ring(cx: int, cy: int, r: int):
    if r == 0:
        yield (cx, cy)
        return
    for i in range(cx - r, cx + r + 1):
        yield (i, cy - r)
        yield (i, cy + r)
    for j in range(cy - r + 1, cy + r):
        yield (cx - r, j)
        yield (cx + r, j)


def nearest(index: GridIndex, q: PlanarPoint) -> int:
    return index.nearest(q.x, q.y)[0]


@dataclass(frozen=True)
class PatchGrid:
    """Row-major grid of square patches; wind speed is uniform within a patch."""

    origin: PlanarPoint
    cell_size: float
    n_rows: int
    n_cols: int

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError("grid needs at least one row and column")

    @classmethod
    def covering(cls, xy, cell_size: float) -> "PatchGrid":
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        if len(xy) == 0:
            return cls(PlanarPoint(0.0, 0.0), cell_size, 1, 1)
        lo = xy.min(axis=0)
        hi = xy.max(axis=0)
        n_cols = max(1, int(math.ceil((hi[0] - lo[0]) / cell_size)))
        n_rows = max(1, int(math.ceil((hi[1] - lo[1]) / cell_size)))
        return cls(PlanarPoint(float(lo[0]), float(lo[1])), float(cell_size), n_rows, n_cols)

    @property
    def n_patches(self) -> int:
        return self.n_rows * self.n_cols

    def patches_of(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        fx = (x - self.origin.x) / self.cell_size
        fy = (y - self.origin.y) / self.cell_size
        lim_c, lim_r = self.n_cols + 0.5, self.n_rows + 0.5
        bad = (fx < -0.5) | (fx > lim_c) | (fy < -0.5) | (fy > lim_r)
        if np.any(bad):
            raise ValueError("point outside patch grid beyond clamp margin")
        col = np.clip(np.floor(fx).astype(np.int64), 0, self.n_cols - 1)
        row = np.clip(np.floor(fy).astype(np.int64), 0, self.n_rows - 1)
        return row * self.n_cols + col

    def centers(self) -> np.ndarray:
        cols = self.origin.x + (np.arange(self.n_cols) + 0.5) * self.cell_size
        rows = self.origin.y + (np.arange(self.n_rows) + 0.5) * self.cell_size
        gx, gy = np.meshgrid(cols, rows)
        return np.column_stack([gx.ravel(), gy.ravel()])


def patch_of(grid: PatchGrid, p: PlanarPoint) -> int:
    return int(grid.patches_of(np.array([p.x]), np.array([p.y]))[0])
