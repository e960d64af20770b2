import numpy as np
import pytest

from resilisim.geo import GeoPoint, PatchGrid
from resilisim.network import EdgeKind, NetworkGraph, NodeKind, assign_substations, synthesize
from resilisim.simulation import SimulationConfig, estimate
from resilisim.testbed import TestbedSpec, generate_testbed


def make_graph(kinds, xy, edges, customers=None, area=None, names=None, patch_size=500.0):
    """Hand-built graph. ``kinds`` uses 'S', 'P', 'L'; substations are taken in id order."""
    code = {"S": NodeKind.SUBSTATION, "P": NodeKind.POLE, "L": NodeKind.LOAD}
    kind = np.array([code[k] for k in kinds], dtype=np.int8)
    xy = np.asarray(xy, dtype=float)
    n = len(kind)
    ea = np.array([a for a, b in edges], dtype=np.int32)
    eb = np.array([b for a, b in edges], dtype=np.int32)
    length = np.linalg.norm(xy[ea] - xy[eb], axis=1) if len(edges) else np.zeros(0)
    ekind = np.where((kind[ea] == NodeKind.LOAD) | (kind[eb] == NodeKind.LOAD), EdgeKind.DROP,
                     np.where((kind[ea] == NodeKind.SUBSTATION) | (kind[eb] == NodeKind.SUBSTATION),
                              EdgeKind.FEEDER, EdgeKind.ROAD)).astype(np.int8)
    subs = np.flatnonzero(kind == NodeKind.SUBSTATION)
    cust = np.zeros(n, dtype=np.int64) if customers is None else np.asarray(customers, dtype=np.int64)
    grid = PatchGrid.covering(xy, patch_size)
    mid = 0.5 * (xy[ea] + xy[eb])
    g = NetworkGraph(
        origin=GeoPoint(42.33, -83.05), kind=kind, xy=xy, customers=cust,
        area=np.full(n, -1, dtype=np.int32), ea=ea, eb=eb, length=length.astype(float),
        tree_cover=np.zeros(len(ea)), patch=grid.patches_of(mid[:, 0], mid[:, 1]) if len(ea) else
        np.zeros(0, dtype=np.int64), edge_kind=ekind, substations=subs.astype(np.int64),
        substation_names=names or [f"SUB{i + 1}" for i in range(len(subs))],
        substation_ids=list(range(1, len(subs) + 1)), grid=grid,
    )
    g.area = np.asarray(area, dtype=np.int32) if area is not None else assign_substations(g)[0]
    return g


@pytest.fixture
def radial():
    """S0 - P1 - P2 - P3 with loads L4 (5 customers) on P2 and L5 (7) on P3.

    Edge ids: 0 S0-P1, 1 P1-P2, 2 P2-P3, 3 P2-L4, 4 P3-L5.
    """
    xy = [(0, 0), (30, 0), (60, 0), (90, 0), (60, 10), (90, 10)]
    edges = [(0, 1), (1, 2), (2, 3), (2, 4), (3, 5)]
    return make_graph("SPPPLL", xy, edges, customers=[0, 0, 0, 0, 5, 7])


@pytest.fixture(scope="session")
def testbed_graph():
    roads, buildings, subs, raster = generate_testbed(TestbedSpec(), 1)
    return synthesize(roads, buildings, subs, raster)


@pytest.fixture(scope="session")
def testbed_episodes(testbed_graph):
    report, records = estimate(testbed_graph, SimulationConfig(), 120, master_seed=11)
    return report, records
