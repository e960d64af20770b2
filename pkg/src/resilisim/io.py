"""Readers and writers for ingest files and the binary network file.

Ingest formats
--------------
``substations.csv``   ``id,name,lat,lon``
``roads.jsonl``       one polyline per line, ``[[lat, lon], ...]``
``buildings.csv``     ``lat,lon,floor_area_m2,residential`` (residential is 0/1)
``tree_cover.grid``   text raster::

    # tree_cover v1
    origin_lat <deg>
    origin_lon <deg>
    cell_deg <deg>
    nrows <int>
    ncols <int>
    <nrows lines of ncols canopy fractions, southern row first>

Network file (little-endian)
----------------------------
``b"RSGRAPH\\0"``, ``u32 version``, ``u32 n_nodes``, ``u32 n_edges``, ``u32 n_areas``,
``f64 origin_lat, origin_lon``, ``f64 grid_x0, grid_y0, cell``, ``u32 rows, cols``,
then node arrays ``i1 kind``, ``f8 x``, ``f8 y``, ``i8 customers``, ``i4 area``,
edge arrays ``i4 a``, ``i4 b``, ``f8 length``, ``f8 tree_cover``, ``i8 patch``, ``i1 kind``,
``i8 substation_node[n_areas]``, ``i8 substation_id[n_areas]`` and finally the
substation names as ``u32 length + utf-8`` each, then the stats as
``u32 length + json``.
"""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .geo import GeoPoint, PatchGrid, PlanarPoint, unproject_many
from .network import Building, IngestError, NetworkGraph, NodeKind, Substation, TreeRaster

GRAPH_MAGIC = b"RSGRAPH\x00"
GRAPH_VERSION = 1
MAX_INVALID_SHARE = 0.01


def _check_errors(what, errors, total):
    if errors and len(errors) > MAX_INVALID_SHARE * max(total, 1):
        raise IngestError(f"{what}: {len(errors)} of {total} records invalid", errors)


def read_substations(path) -> list[Substation]:
    out, errors, total = [], [], 0
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            total += 1
            try:
                out.append(Substation(int(row["id"]), row["name"].strip(),
                                      GeoPoint(float(row["lat"]), float(row["lon"]))))
            except (KeyError, ValueError, TypeError, AttributeError) as exc:
                errors.append(f"{path}:{lineno}: {exc}")
    _check_errors(path, errors, total)
    ids = [s.id for s in out]
    if len(set(ids)) != len(ids):
        raise IngestError(f"{path}: duplicate substation ids", [])
    return out


def read_roads(path) -> list[list[tuple[float, float]]]:
    out, errors, total = [], [], 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            total += 1
            try:
                pts = [(float(a), float(b)) for a, b in json.loads(line)]
                if len(pts) < 2:
                    raise ValueError("polyline with fewer than two points")
                for lat, lon in pts:
                    GeoPoint(lat, lon)
                out.append(pts)
            except (ValueError, TypeError) as exc:
                errors.append(f"{path}:{lineno}: {exc}")
    _check_errors(path, errors, total)
    return out


def read_buildings(path) -> list[Building]:
    out, errors, total = [], [], 0
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            total += 1
            try:
                res = row["residential"].strip()
                if res not in ("0", "1"):
                    raise ValueError(f"residential must be 0 or 1, got {res!r}")
                out.append(Building(GeoPoint(float(row["lat"]), float(row["lon"])),
                                    float(row["floor_area_m2"]), res == "1"))
            except (KeyError, ValueError, TypeError, AttributeError) as exc:
                errors.append(f"{path}:{lineno}: {exc}")
    _check_errors(path, errors, total)
    return out


def read_tree_raster(path) -> TreeRaster:
    header = {}
    rows = []
    with open(path) as fh:
        for line in fh:
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            key = s.split()[0]
            if key in ("origin_lat", "origin_lon", "cell_deg", "nrows", "ncols"):
                header[key] = float(s.split()[1])
            else:
                rows.append([float(v) for v in s.split()])
    try:
        nr, nc = int(header["nrows"]), int(header["ncols"])
        values = np.array(rows, dtype=float).reshape(nr, nc)
        raster = TreeRaster(header["origin_lat"], header["origin_lon"], header["cell_deg"], values)
    except (KeyError, ValueError) as exc:
        raise IngestError(f"{path}: malformed tree raster ({exc})", [str(exc)]) from exc
    if np.any((values < 0) | (values > 1)):
        raise IngestError(f"{path}: canopy fractions outside [0, 1]", [])
    return raster


def write_substations(path, subs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "name", "lat", "lon"])
        for s in subs:
            w.writerow([s.id, s.name, repr(s.pos.lat), repr(s.pos.lon)])


def write_roads(path, roads):
    with open(path, "w") as fh:
        for line in roads:
            fh.write(json.dumps([[lat, lon] for lat, lon in line]) + "\n")


def write_buildings(path, buildings):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lat", "lon", "floor_area_m2", "residential"])
        for b in buildings:
            w.writerow([repr(b.centroid.lat), repr(b.centroid.lon), repr(b.floor_area), int(b.residential)])


def write_tree_raster(path, r: TreeRaster):
    nr, nc = r.values.shape
    with open(path, "w") as fh:
        fh.write("# tree_cover v1\n")
        fh.write(f"origin_lat {r.origin_lat!r}\norigin_lon {r.origin_lon!r}\ncell_deg {r.cell_deg!r}\n")
        fh.write(f"nrows {nr}\nncols {nc}\n")
        for row in r.values:
            fh.write(" ".join(f"{v:.3f}" for v in row) + "\n")


def write_inputs(out_dir, roads, buildings, subs, raster) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "substations": out_dir / "substations.csv",
        "roads": out_dir / "roads.jsonl",
        "buildings": out_dir / "buildings.csv",
        "tree_cover": out_dir / "tree_cover.grid",
    }
    write_substations(paths["substations"], subs)
    write_roads(paths["roads"], roads)
    write_buildings(paths["buildings"], buildings)
    write_tree_raster(paths["tree_cover"], raster)
    return paths


# -- network file ---------------------------------------------------------

_NODE_ARRAYS = [("kind", "<i1"), ("x", "<f8"), ("y", "<f8"), ("customers", "<i8"), ("area", "<i4")]
_EDGE_ARRAYS = [("ea", "<i4"), ("eb", "<i4"), ("length", "<f8"), ("tree_cover", "<f8"),
                ("patch", "<i8"), ("edge_kind", "<i1")]


def save_graph(g: NetworkGraph, path):
    cols = {"x": g.xy[:, 0], "y": g.xy[:, 1]}
    with open(path, "wb") as fh:
        fh.write(GRAPH_MAGIC)
        fh.write(struct.pack("<4I", GRAPH_VERSION, g.n_nodes, g.n_edges, g.n_areas))
        fh.write(struct.pack("<5d", g.origin.lat, g.origin.lon, g.grid.origin.x, g.grid.origin.y,
                             g.grid.cell_size))
        fh.write(struct.pack("<2I", g.grid.n_rows, g.grid.n_cols))
        for name, dt in _NODE_ARRAYS:
            fh.write(np.ascontiguousarray(cols.get(name, getattr(g, name, None)), dtype=dt).tobytes())
        for name, dt in _EDGE_ARRAYS:
            fh.write(np.ascontiguousarray(getattr(g, name), dtype=dt).tobytes())
        fh.write(np.asarray(g.substations, dtype="<i8").tobytes())
        fh.write(np.asarray(g.substation_ids, dtype="<i8").tobytes())
        for name in g.substation_names:
            b = name.encode()
            fh.write(struct.pack("<I", len(b)) + b)
        stats = json.dumps(g.stats, sort_keys=True).encode()
        fh.write(struct.pack("<I", len(stats)) + stats)


def load_graph(path) -> NetworkGraph:
    buf = Path(path).read_bytes()
    if buf[:8] != GRAPH_MAGIC:
        raise ValueError(f"{path}: not a network file")
    version, n, m, a = struct.unpack_from("<4I", buf, 8)
    if version != GRAPH_VERSION:
        raise ValueError(f"{path}: unsupported network file version {version}")
    off = 24
    olat, olon, gx, gy, cell = struct.unpack_from("<5d", buf, off)
    off += 40
    rows, cols = struct.unpack_from("<2I", buf, off)
    off += 8

    def take(dt, count):
        nonlocal off
        arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).copy()
        off += arr.nbytes
        return arr

    node = {name: take(dt, n) for name, dt in _NODE_ARRAYS}
    edge = {name: take(dt, m) for name, dt in _EDGE_ARRAYS}
    subs = take("<i8", a)
    sub_ids = take("<i8", a).tolist()
    names = []
    for _ in range(a):
        (ln,) = struct.unpack_from("<I", buf, off)
        names.append(buf[off + 4:off + 4 + ln].decode())
        off += 4 + ln
    (ln,) = struct.unpack_from("<I", buf, off)
    stats = json.loads(buf[off + 4:off + 4 + ln].decode())
    return NetworkGraph(
        origin=GeoPoint(olat, olon), kind=node["kind"].astype(np.int8),
        xy=np.column_stack([node["x"], node["y"]]), customers=node["customers"].astype(np.int64),
        area=node["area"].astype(np.int32), ea=edge["ea"].astype(np.int32), eb=edge["eb"].astype(np.int32),
        length=edge["length"], tree_cover=edge["tree_cover"], patch=edge["patch"].astype(np.int64),
        edge_kind=edge["edge_kind"].astype(np.int8), substations=subs.astype(np.int64),
        substation_names=names, substation_ids=[int(i) for i in sub_ids],
        grid=PatchGrid(PlanarPoint(gx, gy), cell, rows, cols), stats=stats,
    )


# -- GeoJSON --------------------------------------------------------------

def lonlat(g, ids):
    lat, lon = unproject_many(g.xy[ids, 0], g.xy[ids, 1], g.origin)
    return [[round(float(o), 7), round(float(a), 7)] for a, o in zip(lat, lon)]


def graph_geojson(g: NetworkGraph) -> dict:
    kinds = {int(k): k.name.lower() for k in NodeKind}
    coords = lonlat(g, np.arange(g.n_nodes))
    feats = []
    for i in range(g.n_nodes):
        props = {"id": i, "kind": kinds[int(g.kind[i])], "customers": int(g.customers[i]),
                 "area_id": area_name(g, int(g.area[i]))}
        feats.append({"type": "Feature", "geometry": {"type": "Point", "coordinates": coords[i]},
                      "properties": props})
    for e in range(g.n_edges):
        a, b = int(g.ea[e]), int(g.eb[e])
        props = {"id": e, "kind": "line", "length_m": round(float(g.length[e]), 3),
                 "tree_cover": round(float(g.tree_cover[e]), 3), "patch": int(g.patch[e])}
        feats.append({"type": "Feature", "geometry": {"type": "LineString", "coordinates": [coords[a], coords[b]]},
                      "properties": props})
    return {"type": "FeatureCollection", "features": feats}


def area_name(g, a):
    return g.substation_names[a] if a >= 0 else None


def write_geojson(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, separators=(",", ":"))

