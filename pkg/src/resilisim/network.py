"""Synthetic distribution network built from roads, buildings and substations.

Pipeline (see :func:`synthesize`):

1. substations are read from a CSV with coordinates;
2. road polylines are split into pole-to-pole spans no longer than ``max_span_m``;
3. customers per building come from floor area;
4. buildings and substations hook onto their nearest pole and every node is
   assigned to the substation with the shortest line-length path;
5. buildings sharing a pole and a side of the road collapse into one load.

The resulting :class:`NetworkGraph` stores nodes and edges as flat numpy
arrays with dense ids, which is what the simulation hot loops index into.
"""
from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy import sparse

from .geo import GeoPoint, GridIndex, PatchGrid, PlanarPoint, project_many, unproject_many

log = logging.getLogger(__name__)


class NodeKind(IntEnum):
    SUBSTATION = 0
    POLE = 1
    LOAD = 2


class EdgeKind(IntEnum):
    ROAD = 0
    FEEDER = 1  # substation -> nearest pole
    DROP = 2  # pole -> load


@dataclass(frozen=True)
class Node:
    id: int
    kind: NodeKind
    pos: PlanarPoint
    customers: int
    area_id: int


@dataclass(frozen=True)
class Edge:
    id: int
    a: int
    b: int
    length: float
    tree_cover: float
    patch: int


@dataclass(frozen=True)
class Building:
    centroid: GeoPoint
    floor_area: float
    residential: bool

    def __post_init__(self):
        if not self.floor_area > 0:
            raise ValueError(f"floor_area must be positive, got {self.floor_area}")


@dataclass(frozen=True)
class Substation:
    id: int
    name: str
    pos: GeoPoint


@dataclass
class TreeRaster:
    """Canopy fraction on a regular lat/lon grid; row 0 is the southern edge."""

    origin_lat: float
    origin_lon: float
    cell_deg: float
    values: np.ndarray

    def sample(self, lat, lon) -> np.ndarray:
        lat = np.asarray(lat, dtype=float)
        lon = np.asarray(lon, dtype=float)
        nr, nc = self.values.shape
        r = np.floor((lat - self.origin_lat) / self.cell_deg).astype(np.int64)
        c = np.floor((lon - self.origin_lon) / self.cell_deg).astype(np.int64)
        inside = (r >= 0) & (r < nr) & (c >= 0) & (c < nc)
        out = np.zeros(lat.shape, dtype=float)
        out[inside] = self.values[r[inside], c[inside]]
        return np.clip(out, 0.0, 1.0)


@dataclass
class NetworkConfig:
    max_span_m: float = 40.0
    snap_tolerance_m: float = 1.0
    res_area_per_customer: float = 150.0
    nonres_area_per_customer: float = 500.0
    patch_size_m: float = 500.0
    min_drop_m: float = 1.0
    index_cell_m: float = 100.0


class IngestError(ValueError):
    """Too many malformed input records."""

    def __init__(self, message: str, errors: list[str]):
        super().__init__(message)
        self.errors = errors


@dataclass
class NetworkGraph:
    origin: GeoPoint
    kind: np.ndarray  # int8 NodeKind per node
    xy: np.ndarray  # (n, 2) planar meters
    customers: np.ndarray  # int64
    area: np.ndarray  # int32 area index, -1 if unassigned
    ea: np.ndarray  # int32 endpoints
    eb: np.ndarray
    length: np.ndarray
    tree_cover: np.ndarray
    patch: np.ndarray  # int64 patch index per edge
    edge_kind: np.ndarray  # int8 EdgeKind
    substations: np.ndarray  # node ids; position in this array is the area index
    substation_names: list[str]
    substation_ids: list[int]
    grid: PatchGrid
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self._adj = None
        self._csr = None
        self._area_cache = None

    @property
    def n_nodes(self) -> int:
        return len(self.kind)

    @property
    def n_edges(self) -> int:
        return len(self.ea)

    @property
    def n_areas(self) -> int:
        return len(self.substations)

    def node(self, i: int) -> Node:
        return Node(int(i), NodeKind(int(self.kind[i])), PlanarPoint(*map(float, self.xy[i])),
                    int(self.customers[i]), int(self.area[i]))

    def edge(self, e: int) -> Edge:
        return Edge(int(e), int(self.ea[e]), int(self.eb[e]), float(self.length[e]),
                    float(self.tree_cover[e]), int(self.patch[e]))

    @property
    def adjacency(self):
        """CSR-style per-node incident edges: ``(indptr, edge_ids)``."""
        if self._adj is None:
            self._adj = _incidence(self.n_nodes, self.ea, self.eb)
        return self._adj

    def incident(self, node: int) -> np.ndarray:
        indptr, eids = self.adjacency
        return eids[indptr[node]:indptr[node + 1]]

    def neighbors(self, node: int) -> np.ndarray:
        e = self.incident(node)
        return np.where(self.ea[e] == node, self.eb[e], self.ea[e])

    @property
    def degree(self) -> np.ndarray:
        return np.bincount(np.concatenate([self.ea, self.eb]), minlength=self.n_nodes)

    def csr(self, edge_mask=None) -> sparse.csr_matrix:
        """Symmetric unweighted adjacency, optionally restricted to ``edge_mask``."""
        if edge_mask is None:
            if self._csr is None:
                self._csr = _adjacency_matrix(self.n_nodes, self.ea, self.eb)
            return self._csr
        return _adjacency_matrix(self.n_nodes, self.ea[edge_mask], self.eb[edge_mask])

    def loads(self) -> np.ndarray:
        return np.flatnonzero(self.kind == NodeKind.LOAD)

    def area_customers(self) -> np.ndarray:
        """Total customers per area (unassigned loads excluded)."""
        m = (self.kind == NodeKind.LOAD) & (self.area >= 0)
        return np.bincount(self.area[m], weights=self.customers[m],
                           minlength=self.n_areas).astype(np.int64)

    def area_positions(self) -> list[np.ndarray]:
        """Candidate sample positions per area: its load nodes, else the substation."""
        if self._area_cache is None:
            loads = self.loads()
            loads = loads[self.area[loads] >= 0]
            order = np.argsort(self.area[loads], kind="stable")
            loads = loads[order]
            splits = np.searchsorted(self.area[loads], np.arange(1, self.n_areas))
            out = []
            for a, group in enumerate(np.split(loads, splits)):
                if len(group) == 0:
                    group = np.array([self.substations[a]])
                out.append(self.xy[group])
            self._area_cache = out
        return self._area_cache

    def area_index(self, name: str) -> int:
        return self.substation_names.index(name)


def _incidence(n, ea, eb):
    ends = np.concatenate([ea, eb]).astype(np.int64)
    eids = np.concatenate([np.arange(len(ea)), np.arange(len(eb))])
    order = np.argsort(ends, kind="stable")
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(ends, minlength=n), out=indptr[1:])
    return indptr, eids[order]


def _adjacency_matrix(n, ea, eb):
    rows = np.concatenate([ea, eb])
    cols = np.concatenate([eb, ea])
    data = np.ones(len(rows), dtype=np.int8)
    return sparse.csr_matrix((data, (rows, cols)), shape=(n, n))


# -- step 2 ---------------------------------------------------------------

def densify_road(polyline, max_span: float = 40.0):
    """Split a polyline into spans no longer than ``max_span``.

    Returns ``(points, edges)``: an ``(m, 2)`` array whose first entries are
    the original vertices followed by inserted poles, and a list of
    ``(i, j, length)`` spans referencing rows of ``points``.
    Zero-length segments are skipped.
    """
    pts = [(float(p.x), float(p.y)) if isinstance(p, PlanarPoint) else (float(p[0]), float(p[1]))
           for p in polyline]
    if len(pts) < 2:
        raise ValueError("polyline needs at least two points")
    if max_span <= 0:
        raise ValueError("max_span must be positive")
    points = list(pts)
    edges = []
    for i in range(len(pts) - 1):
        new_pts, spans = _split_segment(pts[i], pts[i + 1], max_span)
        if spans is None:
            log.warning("skipping zero-length road segment at %s", pts[i])
            continue
        ids = [i] + list(range(len(points), len(points) + len(new_pts))) + [i + 1]
        points.extend(new_pts)
        for k, sl in enumerate(spans):
            edges.append((ids[k], ids[k + 1], sl))
    return np.array(points, dtype=float), edges


def _split_segment(p, q, max_span):
    dx, dy = q[0] - p[0], q[1] - p[1]
    seg = math.hypot(dx, dy)
    if seg == 0.0:
        return None, None
    n = max(1, math.ceil(seg / max_span))
    while seg / n > max_span:
        n += 1
    inner = [(p[0] + dx * k / n, p[1] + dy * k / n) for k in range(1, n)]
    return inner, [seg / n] * n


# -- step 3 ---------------------------------------------------------------

def estimate_customers(b: Building, cfg: NetworkConfig | None = None) -> int:
    cfg = cfg or NetworkConfig()
    per = cfg.res_area_per_customer if b.residential else cfg.nonres_area_per_customer
    return max(1, math.ceil(b.floor_area / per))


# -- step 4 ---------------------------------------------------------------

def assign_substations(g: NetworkGraph):
    """Multi-source Dijkstra over line length from every substation.

    Each node gets the index of the substation with the shortest path; exact
    ties go to the lower substation index. Returns ``(area, n_unreachable_loads)``.
    """
    area = _nearest_source(g.n_nodes, g.ea, g.eb, g.length, g.substations)
    unreachable = int(np.sum((g.kind == NodeKind.LOAD) & (area < 0)))
    if unreachable:
        log.warning("%d load nodes cannot reach any substation", unreachable)
    return area, unreachable


def _nearest_source(n, ea, eb, length, sources):
    indptr, eids = _incidence(n, ea, eb)
    indptr = indptr.tolist()
    eids = eids.tolist()
    ea_l, eb_l, w = ea.tolist(), eb.tolist(), length.tolist()
    dist = [math.inf] * n
    owner = [-1] * n
    heap = []
    for rank, s in enumerate(sources):
        s = int(s)
        if owner[s] < 0:
            dist[s], owner[s] = 0.0, rank
            heap.append((0.0, rank, s))
    heapq.heapify(heap)
    done = [False] * n
    while heap:
        d, rank, u = heapq.heappop(heap)
        if done[u] or d != dist[u] or rank != owner[u]:
            continue
        done[u] = True
        for k in range(indptr[u], indptr[u + 1]):
            e = eids[k]
            v = eb_l[e] if ea_l[e] == u else ea_l[e]
            nd = d + w[e]
            if nd < dist[v] or (nd == dist[v] and rank < owner[v]):
                dist[v] = nd
                owner[v] = rank
                heapq.heappush(heap, (nd, rank, v))
    return np.array(owner, dtype=np.int32)


# -- step 5 ---------------------------------------------------------------

def side_of_road(road_dir, pole_xy, building_xy) -> int:
    cross = road_dir[0] * (building_xy[1] - pole_xy[1]) - road_dir[1] * (building_xy[0] - pole_xy[0])
    return 1 if cross >= 0 else -1


def merge_buildings(g: NetworkGraph) -> NetworkGraph:
    """Collapse loads hanging off the same pole on the same road side.

    The merged load sits at the mean position of its members, carries the
    summed customers and keeps one drop edge of the members' mean drop length.
    Node ids are re-densified (substations, poles, then loads).
    """
    is_road = g.edge_kind == EdgeKind.ROAD
    road_nbr = {}
    for a, b in zip(g.ea[is_road].tolist(), g.eb[is_road].tolist()):
        road_nbr[a] = min(road_nbr.get(a, b), b)
        road_nbr[b] = min(road_nbr.get(b, a), a)

    drops = np.flatnonzero(g.edge_kind == EdgeKind.DROP)
    groups: dict[tuple[int, int], list[int]] = {}
    for e in drops.tolist():
        a, b = int(g.ea[e]), int(g.eb[e])
        pole, load = (a, b) if g.kind[b] == NodeKind.LOAD else (b, a)
        nb = road_nbr.get(pole)
        if nb is None:
            side = 1
        else:
            side = side_of_road(g.xy[nb] - g.xy[pole], g.xy[pole], g.xy[load])
        groups.setdefault((pole, side), []).append(e)

    keep = g.kind != NodeKind.LOAD
    old_ids = np.flatnonzero(keep)
    remap = np.full(g.n_nodes, -1, dtype=np.int64)
    remap[old_ids] = np.arange(len(old_ids))
    n_keep = len(old_ids)

    new_xy, new_cust, new_area, new_drop = [], [], [], []
    drop_pole = []
    for (pole, _side), es in sorted(groups.items()):
        members = [int(g.eb[e]) if g.kind[g.eb[e]] == NodeKind.LOAD else int(g.ea[e]) for e in es]
        new_xy.append(g.xy[members].mean(axis=0))
        new_cust.append(int(g.customers[members].sum()))
        new_area.append(int(g.area[pole]))
        new_drop.append(float(g.length[es].mean()))
        drop_pole.append(int(remap[pole]))

    n_load = len(new_xy)
    kind = np.concatenate([g.kind[keep], np.full(n_load, NodeKind.LOAD, dtype=np.int8)])
    xy = np.vstack([g.xy[keep], np.array(new_xy).reshape(-1, 2)])
    customers = np.concatenate([g.customers[keep], np.array(new_cust, dtype=np.int64)])
    area = np.concatenate([g.area[keep], np.array(new_area, dtype=np.int32)])

    non_drop = g.edge_kind != EdgeKind.DROP
    ea = np.concatenate([remap[g.ea[non_drop]], np.array(drop_pole, dtype=np.int64)])
    eb = np.concatenate([remap[g.eb[non_drop]], n_keep + np.arange(n_load)])
    length = np.concatenate([g.length[non_drop], np.array(new_drop, dtype=float)])
    ekind = np.concatenate([g.edge_kind[non_drop], np.full(n_load, EdgeKind.DROP, dtype=np.int8)])
    tree = np.concatenate([g.tree_cover[non_drop], np.zeros(n_load)])
    patch = np.concatenate([g.patch[non_drop], np.zeros(n_load, dtype=np.int64)])

    return NetworkGraph(
        origin=g.origin, kind=kind, xy=xy, customers=customers, area=area.astype(np.int32),
        ea=ea.astype(np.int32), eb=eb.astype(np.int32), length=length, tree_cover=tree,
        patch=patch, edge_kind=ekind, substations=remap[g.substations].astype(np.int64),
        substation_names=list(g.substation_names), substation_ids=list(g.substation_ids),
        grid=g.grid, stats=dict(g.stats),
    )


# -- full pipeline --------------------------------------------------------

def synthesize(roads, buildings, substations, tree_raster: TreeRaster | None,
               cfg: NetworkConfig | None = None) -> NetworkGraph:
    """Build the network graph from ingested records.

    ``roads`` is a list of polylines of ``(lat, lon)`` pairs, ``buildings`` a
    list of :class:`Building`, ``substations`` a list of :class:`Substation`.
    """
    cfg = cfg or NetworkConfig()
    substations = sorted(substations, key=lambda s: s.id)
    if not substations:
        raise ValueError("at least one substation is required")
    origin = _origin(roads, substations)

    # step 2: snapped road vertices and densified spans
    vx, vy, segs = _road_vertices(roads, origin, cfg.snap_tolerance_m)
    seg_pairs = sorted(segs)
    pole_xy = list(zip(vx, vy))
    road_edges = []
    for a, b in seg_pairs:
        inner, spans = _split_segment(pole_xy[a], pole_xy[b], cfg.max_span_m)
        if spans is None:
            continue
        ids = [a] + list(range(len(pole_xy), len(pole_xy) + len(inner))) + [b]
        pole_xy.extend(inner)
        for k, sl in enumerate(spans):
            road_edges.append((ids[k], ids[k + 1], sl))
    n_poles = len(pole_xy)
    pole_xy = np.array(pole_xy, dtype=float).reshape(-1, 2)

    n_sub = len(substations)
    sub_lat = np.array([s.pos.lat for s in substations])
    sub_lon = np.array([s.pos.lon for s in substations])
    sx, sy = project_many(sub_lat, sub_lon, origin)
    sub_xy = np.column_stack([sx, sy])

    # step 3: customers
    n_b = len(buildings)
    b_cust = np.array([estimate_customers(b, cfg) for b in buildings], dtype=np.int64)
    if n_b:
        bx, by = project_many([b.centroid.lat for b in buildings], [b.centroid.lon for b in buildings], origin)
        b_xy = np.column_stack([bx, by])
    else:
        b_xy = np.zeros((0, 2))

    # node layout: substations | poles | buildings
    pole0 = n_sub
    bld0 = n_sub + n_poles
    n = bld0 + n_b
    kind = np.concatenate([np.full(n_sub, NodeKind.SUBSTATION), np.full(n_poles, NodeKind.POLE),
                           np.full(n_b, NodeKind.LOAD)]).astype(np.int8)
    xy = np.vstack([sub_xy, pole_xy, b_xy])
    customers = np.concatenate([np.zeros(n_sub + n_poles, dtype=np.int64), b_cust])

    ea, eb, length, ekind = [], [], [], []
    for a, b, sl in road_edges:
        ea.append(pole0 + a)
        eb.append(pole0 + b)
        length.append(sl)
        ekind.append(EdgeKind.ROAD)

    # step 4a: hook substations and buildings onto nearest poles
    if n_poles:
        index = GridIndex(pole_xy, cell=cfg.index_cell_m)
        for s in range(n_sub):
            p, d = index.nearest(*sub_xy[s])
            ea.append(s)
            eb.append(pole0 + p)
            length.append(max(d, cfg.min_drop_m))
            ekind.append(EdgeKind.FEEDER)
        for k in range(n_b):
            p, d = index.nearest(*b_xy[k])
            ea.append(pole0 + p)
            eb.append(bld0 + k)
            length.append(max(d, cfg.min_drop_m))
            ekind.append(EdgeKind.DROP)
    elif n_b:
        raise ValueError("buildings given but no road poles to connect them to")

    ea = np.array(ea, dtype=np.int32)
    eb = np.array(eb, dtype=np.int32)
    length = np.array(length, dtype=float)
    ekind = np.array(ekind, dtype=np.int8)

    grid = PatchGrid.covering(xy, cfg.patch_size_m)
    g = NetworkGraph(
        origin=origin, kind=kind, xy=xy, customers=customers,
        area=np.full(n, -1, dtype=np.int32), ea=ea, eb=eb, length=length,
        tree_cover=np.zeros(len(ea)), patch=np.zeros(len(ea), dtype=np.int64), edge_kind=ekind,
        substations=np.arange(n_sub, dtype=np.int64),
        substation_names=[s.name for s in substations], substation_ids=[s.id for s in substations],
        grid=grid,
    )

    # step 4b: area assignment
    area, unreachable = assign_substations(g)
    g.area = area

    # step 5: merge buildings
    n_buildings_in = n_b
    g = merge_buildings(g)

    # tree cover and patch per edge from the midpoint
    mid = 0.5 * (g.xy[g.ea] + g.xy[g.eb])
    if tree_raster is not None and g.n_edges:
        lat, lon = unproject_many(mid[:, 0], mid[:, 1], origin)
        g.tree_cover = tree_raster.sample(lat, lon)
    g.patch = g.grid.patches_of(mid[:, 0], mid[:, 1]) if g.n_edges else g.patch

    g.stats = summarize(g)
    g.stats["buildings"] = n_buildings_in
    g.stats["unreachable_loads"] = unreachable
    log.info("synthesized network: %s", g.stats)
    return g


def summarize(g: NetworkGraph) -> dict:
    return {
        "substations": int(np.sum(g.kind == NodeKind.SUBSTATION)),
        "poles": int(np.sum(g.kind == NodeKind.POLE)),
        "loads": int(np.sum(g.kind == NodeKind.LOAD)),
        "nodes": int(g.n_nodes),
        "edges": int(g.n_edges),
        "areas": int(g.n_areas),
        "customers": int(g.customers.sum()),
    }


def _origin(roads, substations) -> GeoPoint:
    lats = [p[0] for line in roads for p in line] or [s.pos.lat for s in substations]
    lons = [p[1] for line in roads for p in line] or [s.pos.lon for s in substations]
    return GeoPoint(0.5 * (min(lats) + max(lats)), 0.5 * (min(lons) + max(lons)))


def _road_vertices(roads, origin, tol):
    """Project and snap polyline vertices; returns coordinates and unique segments."""
    vx, vy = [], []
    buckets: dict[tuple[int, int], list[int]] = {}
    segs = set()
    for line in roads:
        if len(line) < 2:
            continue
        lx, ly = project_many([p[0] for p in line], [p[1] for p in line], origin)
        prev = None
        for x, y in zip(lx.tolist(), ly.tolist()):
            kx, ky = int(math.floor(x / tol)), int(math.floor(y / tol))
            vid = None
            for i in (kx - 1, kx, kx + 1):
                for j in (ky - 1, ky, ky + 1):
                    for c in buckets.get((i, j), ()):
                        if math.hypot(vx[c] - x, vy[c] - y) <= tol and (vid is None or c < vid):
                            vid = c
            if vid is None:
                vid = len(vx)
                vx.append(x)
                vy.append(y)
                buckets.setdefault((kx, ky), []).append(vid)
            if prev is not None and prev != vid:
                segs.add((min(prev, vid), max(prev, vid)))
            prev = vid
    return vx, vy, segs
