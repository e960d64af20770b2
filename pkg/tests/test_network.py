import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra

from resilisim.geo import GeoPoint, PlanarPoint, unproject_many
from resilisim.network import (Building, EdgeKind, NetworkConfig, NodeKind, Substation, assign_substations,
                               densify_road, estimate_customers, synthesize)
from resilisim.testbed import TestbedSpec, generate_testbed

from conftest import make_graph

ORIGIN = GeoPoint(42.33, -83.05)


def geo(x, y):
    lat, lon = unproject_many(x, y, ORIGIN)
    return float(lat), float(lon)


def test_short_segment_kept_whole():
    pts, edges = densify_road([(0, 0), (35, 0)], 40)
    assert len(pts) == 2
    assert edges == [(0, 1, 35.0)]


def test_hundred_metre_segment_gets_two_poles():
    pts, edges = densify_road([(0, 0), (100, 0)], 40)
    assert len(pts) == 4 and len(edges) == 3
    for _, _, length in edges:
        assert length == pytest.approx(100 / 3)
    np.testing.assert_allclose(pts[2:, 0], [100 / 3, 200 / 3])


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.floats(-500, 500), st.floats(-500, 500)), min_size=2, max_size=8),
       st.floats(5, 60))
def test_densified_spans_never_exceed_limit(poly, span):
    pts = np.array(poly)
    if np.any(np.hypot(*np.diff(pts, axis=0).T) == 0):
        return
    out, edges = densify_road(poly, span)
    for i, j, length in edges:
        assert length <= span
        assert math.hypot(*(out[i] - out[j])) == pytest.approx(length, abs=1e-6)
    total = sum(e[2] for e in edges)
    assert total == pytest.approx(np.hypot(*np.diff(pts, axis=0).T).sum(), rel=1e-9)


def test_densify_rejects_degenerate_input():
    with pytest.raises(ValueError):
        densify_road([(0, 0)])
    with pytest.raises(ValueError):
        densify_road([(0, 0), (1, 1)], 0)


@pytest.mark.parametrize("area,res,expected", [
    (120, True, 1), (151, True, 2), (150, True, 1), (300.5, True, 3),
    (499, False, 1), (501, False, 2), (0.01, False, 1),
])
def test_customer_counts(area, res, expected):
    assert estimate_customers(Building(ORIGIN, area, res)) == expected


def test_customer_model_is_configurable():
    cfg = NetworkConfig(res_area_per_customer=50)
    assert estimate_customers(Building(ORIGIN, 120, True), cfg) == 3


def test_building_needs_positive_area():
    with pytest.raises(ValueError):
        Building(ORIGIN, 0.0, True)


def test_single_substation_takes_everything(radial):
    area, unreachable = assign_substations(radial)
    assert unreachable == 0
    assert set(area.tolist()) == {0}


def test_equidistant_load_goes_to_first_substation():
    #  S0 --40-- P2 --40-- S1, load hangs off P2
    g = make_graph("SSPL", [(0, 0), (80, 0), (40, 0), (40, 10)], [(0, 2), (2, 1), (2, 3)],
                   customers=[0, 0, 0, 3])
    assert g.area[3] == 0
    assert g.area[2] == 0


def test_assignment_matches_dijkstra_oracle():
    rng = np.random.default_rng(5)
    n = 200
    xy = rng.uniform(0, 1000, size=(n, 2))
    # random geometric graph plus a spanning chain so it is connected
    d = np.hypot(*(xy[:, None, :] - xy[None, :, :]).transpose(2, 0, 1))
    pairs = {(i, j) for i in range(n) for j in range(i + 1, n) if d[i, j] < 110}
    pairs |= {(i, i + 1) for i in range(n - 1)}
    kinds = "SSSS" + "".join(rng.choice(["P", "L"], n - 4))
    g = make_graph(kinds, xy, sorted(pairs))
    w = csr_matrix((np.r_[g.length, g.length], (np.r_[g.ea, g.eb], np.r_[g.eb, g.ea])), shape=(n, n))
    dist = dijkstra(w, directed=False, indices=g.substations)
    oracle = np.argmin(dist, axis=0)
    loads = g.loads()
    np.testing.assert_array_equal(g.area[loads], oracle[loads])
    np.testing.assert_array_equal(g.area, oracle)


def _one_road(buildings, sub_at=(30.0, 5.0)):
    road = [geo(0.0, 0.0), geo(30.0, 0.0)]
    subs = [Substation(1, "SUB1", GeoPoint(*geo(*sub_at)))]
    return synthesize([road], buildings, subs, None)


def test_same_side_buildings_merge_with_summed_customers():
    blds = [Building(GeoPoint(*geo(1.0, 10.0)), 700.0, True),   # 5 customers
            Building(GeoPoint(*geo(-1.0, 12.0)), 300.0, True),  # 2
            Building(GeoPoint(*geo(0.0, 15.0)), 1000.0, True)]  # 7
    g = _one_road(blds)
    loads = g.loads()
    assert len(loads) == 1
    assert g.customers[loads[0]] == 14
    assert g.stats["buildings"] == 3
    # one drop of the mean drop length
    drop = np.flatnonzero(g.edge_kind == EdgeKind.DROP)
    assert len(drop) == 1
    expected = np.mean([math.hypot(1, 10), math.hypot(1, 12), 15.0])
    assert g.length[drop[0]] == pytest.approx(expected, rel=1e-3)


def test_opposite_sides_stay_separate():
    blds = [Building(GeoPoint(*geo(0.0, 10.0)), 100.0, True),
            Building(GeoPoint(*geo(0.0, -10.0)), 100.0, True)]
    g = _one_road(blds)
    assert len(g.loads()) == 2


def test_empty_building_list():
    g = _one_road([])
    assert g.customers.sum() == 0
    assert set(g.kind.tolist()) == {NodeKind.SUBSTATION, NodeKind.POLE}


def test_testbed_fixture_invariants():
    roads, buildings, subs, raster = generate_testbed(TestbedSpec(10, 10, 200, 50, 2), 4)
    g = synthesize(roads, buildings, subs, raster)
    cfg = NetworkConfig()
    assert g.n_areas == 2
    assert g.length[g.edge_kind == EdgeKind.ROAD].max() <= 40.0
    assert g.customers.sum() == sum(estimate_customers(b, cfg) for b in buildings)
    loads = g.loads()
    assert np.all(g.area[loads] >= 0)
    _, labels = connected_components(g.csr(), directed=False)
    assert np.all(labels[loads] == labels[g.substations[g.area[loads]]])
    kinds = g.kind[np.c_[g.ea, g.eb]]
    assert not np.any((kinds[:, 0] == NodeKind.SUBSTATION) & (kinds[:, 1] == NodeKind.SUBSTATION))
    assert np.all((g.tree_cover >= 0) & (g.tree_cover <= 1))
    assert np.all((g.patch >= 0) & (g.patch < g.grid.n_patches))


def test_testbed_is_deterministic():
    a = generate_testbed(TestbedSpec(), 1)
    b = generate_testbed(TestbedSpec(), 1)
    assert a[0] == b[0] and a[1] == b[1] and a[2] == b[2]
    np.testing.assert_array_equal(a[3].values, b[3].values)
    assert generate_testbed(TestbedSpec(), 2)[1] != a[1]


def test_default_testbed_has_three_areas(testbed_graph):
    g = testbed_graph
    assert g.n_areas == 3
    assert g.stats["areas"] == 3 and g.stats["unreachable_loads"] == 0
    assert all((g.area == a).any() for a in range(3))


def test_zero_building_testbed():
    roads, buildings, subs, raster = generate_testbed(TestbedSpec(n_buildings=0), 1)
    g = synthesize(roads, buildings, subs, raster)
    assert len(g.loads()) == 0 and g.customers.sum() == 0


def test_node_ids_are_dense_and_ordered(testbed_graph):
    k = testbed_graph.kind
    assert np.all(np.diff(k) >= 0)
    assert testbed_graph.node(0).kind == NodeKind.SUBSTATION
    e = testbed_graph.edge(0)
    assert e.length > 0


def test_synthesize_needs_substation():
    with pytest.raises(ValueError):
        synthesize([[geo(0, 0), geo(10, 0)]], [], [], None)
