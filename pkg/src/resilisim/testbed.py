"""Procedural desk-scale stand-in for real road, building and canopy data."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geo import GeoPoint, unproject_many
from .network import Building, Substation, TreeRaster


@dataclass
class TestbedSpec:
    grid_rows: int = 10
    grid_cols: int = 10
    block_m: float = 200.0
    n_buildings: int = 100
    n_substations: int = 3
    origin_lat: float = 42.33
    origin_lon: float = -83.05
    residential_share: float = 0.8
    tree_cell_deg: float = 0.001

    __test__ = False  # keep pytest from collecting this as a test class


def generate_testbed(spec: TestbedSpec, seed: int):
    """Manhattan road grid with buildings strewn along the blocks.

    Returns ``(roads, buildings, substations, tree_raster)`` in the same form
    the file readers produce. Deterministic for a given ``seed``.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x7E57,)))
    origin = GeoPoint(spec.origin_lat, spec.origin_lon)
    R, C, B = spec.grid_rows, spec.grid_cols, spec.block_m
    if R < 1 or C < 1 or (R == 1 and C == 1):
        raise ValueError("road grid needs at least two intersections")
    xs = (np.arange(C) - (C - 1) / 2) * B
    ys = (np.arange(R) - (R - 1) / 2) * B

    def to_geo(x, y):
        lat, lon = unproject_many(x, y, origin)
        return [(round(float(a), 7), round(float(b), 7)) for a, b in zip(np.atleast_1d(lat), np.atleast_1d(lon))]

    roads = []
    if C > 1:
        for y in ys:
            roads.append(to_geo(xs, np.full(C, y)))
    if R > 1:
        for x in xs:
            roads.append(to_geo(np.full(R, x), ys))

    # buildings: random block side, position along it, setback from the road
    segs = []
    if C > 1:
        segs += [((xs[i], y), (xs[i + 1], y)) for y in ys for i in range(C - 1)]
    if R > 1:
        segs += [((x, ys[j]), (x, ys[j + 1])) for x in xs for j in range(R - 1)]
    segs = np.array(segs, dtype=float)
    n = spec.n_buildings
    buildings = []
    if n:
        pick = rng.integers(0, len(segs), n)
        t = rng.uniform(0.05, 0.95, n)
        side = rng.choice([-1.0, 1.0], n)
        setback = rng.uniform(8.0, 30.0, n)
        p0, p1 = segs[pick, 0], segs[pick, 1]
        d = p1 - p0
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        normal = np.column_stack([-d[:, 1], d[:, 0]])
        pos = p0 + (p1 - p0) * t[:, None] + normal * (side * setback)[:, None]
        residential = rng.random(n) < spec.residential_share
        area = np.where(residential, rng.lognormal(np.log(140.0), 0.5, n),
                        rng.lognormal(np.log(900.0), 0.8, n))
        area = np.round(np.maximum(area, 20.0), 1)
        geo = to_geo(pos[:, 0], pos[:, 1])
        buildings = [Building(GeoPoint(*geo[k]), float(area[k]), bool(residential[k])) for k in range(n)]

    # substations: farthest-point spread over intersections, offset off the road
    inter = np.array([(x, y) for y in ys for x in xs])
    chosen = [int(rng.integers(len(inter)))]
    dmin = np.linalg.norm(inter - inter[chosen[0]], axis=1)
    while len(chosen) < min(spec.n_substations, len(inter)):
        k = int(np.argmax(dmin))
        chosen.append(k)
        dmin = np.minimum(dmin, np.linalg.norm(inter - inter[k], axis=1))
    subs = []
    for i, k in enumerate(chosen):
        x, y = inter[k] + np.array([15.0, 15.0])
        lat, lon = to_geo(np.array([x]), np.array([y]))[0]
        subs.append(Substation(i + 1, f"SUB{i + 1}", GeoPoint(lat, lon)))

    # canopy: a few smooth blobs over the bounding box
    pad = B
    lat_lo, lon_lo = unproject_many(xs.min() - pad, ys.min() - pad, origin)
    lat_hi, lon_hi = unproject_many(xs.max() + pad, ys.max() + pad, origin)
    cd = spec.tree_cell_deg
    nr = max(1, int(np.ceil((lat_hi - lat_lo) / cd)))
    nc = max(1, int(np.ceil((lon_hi - lon_lo) / cd)))
    gy, gx = np.mgrid[0:nr, 0:nc]
    field = np.zeros((nr, nc))
    for _ in range(max(3, (nr * nc) // 400)):
        cy, cx = rng.uniform(0, nr), rng.uniform(0, nc)
        s = rng.uniform(2.0, 8.0)
        field += rng.uniform(0.3, 1.0) * np.exp(-((gy - cy) ** 2 + (gx - cx) ** 2) / (2 * s * s))
    field = np.round(np.clip(field, 0.0, 1.0), 3)
    raster = TreeRaster(round(float(lat_lo), 7), round(float(lon_lo), 7), cd, field)
    return roads, buildings, subs, raster
