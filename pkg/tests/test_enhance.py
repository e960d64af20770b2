import numpy as np
import pytest
from scipy.sparse.csgraph import connected_components

from resilisim.enhance import (DERKind, DERPlacement, DERPlan, EpisodeReplay, FitnessEvaluator, GAConfig,
                               crossover, evolve, fitness, hop_distances, mutate, propose_location,
                               proximity_accept, random_plan, replay_with_ders, sampling_weights,
                               weights_from_counts)
from resilisim.simulation import CrewPool, aggregate_values, simulate_outage, trapezoid_resilience

H = 168


def battery(node, kw):
    return DERPlacement(node, DERKind.BATTERY, kw)


def solar(node, kw):
    return DERPlacement(node, DERKind.SOLAR, kw)


def island_outage(radial, repair_h=4):
    """Edge P2-P3 fails in a 1-hour storm; L5 (7 customers) is islanded for ``repair_h`` hours."""
    return simulate_outage(radial, [(2, 0)], 1, CrewPool(1, repair_h, repair_h), np.random.default_rng(0))


def brute_force_replay(rec, plan, g, kw=1.2, hours=4.0):
    """From-scratch replay: components recomputed every hour."""
    fail = dict(rec.failures.tolist())
    rep = dict(rec.repairs.tolist())
    totals = rec.area_totals
    energy = {p.node: p.capacity * hours for p in plan.placements if p.kind == DERKind.BATTERY}
    t_end = max([rec.duration] + list(rep.values()))
    P = np.ones((len(totals), H + 1))
    for t in range(1, min(H, t_end) + 1):
        intact = np.ones(g.n_edges, dtype=bool)
        for e, h in fail.items():
            if h < t and rep.get(e, 10 ** 9) > t:
                intact[e] = False
        _, lab = connected_components(g.csr(intact), directed=False)
        served = np.zeros(len(totals))
        extra = np.zeros(len(totals))
        sub_labels = set(lab[g.substations].tolist())
        for n in np.flatnonzero((g.kind == 2) & (g.area >= 0)):
            if lab[n] == lab[g.substations[g.area[n]]]:
                served[g.area[n]] += g.customers[n]
        for c in sorted({lab[p.node] for p in plan.placements} - sub_labels):
            members = np.flatnonzero((lab == c) & (g.kind == 2) & (g.area >= 0))
            demand = kw * g.customers[members].sum()
            if demand == 0:
                continue
            devs = sorted((p for p in plan.placements if lab[p.node] == c), key=lambda p: p.node)
            supply = sum(p.capacity for p in devs if p.kind == DERKind.SOLAR) if t > rec.duration else 0.0
            need = max(0.0, demand - supply)
            for p in devs:
                if p.kind == DERKind.BATTERY and need > 0:
                    d = min(p.capacity, energy[p.node], need)
                    energy[p.node] -= d
                    need -= d
            frac = min(1.0, (demand - need) / demand)
            for n in members:
                extra[g.area[n]] += frac * g.customers[n]
        P[:, t] = (served + extra) / totals
    return trapezoid_resilience(P, H)


# -- replay -------------------------------------------------------------------------

def test_empty_plan_reproduces_record(testbed_graph, testbed_episodes):
    _, records = testbed_episodes
    for rec in records:
        np.testing.assert_allclose(replay_with_ders(rec, DERPlan(), testbed_graph), rec.area_resilience,
                                   rtol=0, atol=1e-12)


def test_two_hours_of_storage_over_four_hour_outage(radial):
    rec = island_outage(radial)
    np.testing.assert_array_equal(rec.served[0], [12, 5, 5, 5, 5, 12])
    demand = 7 * 1.2
    R = replay_with_ders(rec, DERPlan((battery(3, demand),)), radial, storage_hours=2.0)
    # P = 1, 1, 1, 5/12, 5/12, 1, ... on hours 0..5
    expected = (2 + 2 * (1 + 5 / 12) / 2 + 5 / 12 + (H - 5)) / H
    assert R[0] == pytest.approx(expected, abs=1e-12)
    assert R[0] > rec.area_resilience[0]


def test_solar_only_after_storm(radial):
    rec = island_outage(radial)
    R = replay_with_ders(rec, DERPlan((solar(5, 100.0),)), radial)
    # hour 1 is still inside the storm
    expected = ((1 + 5 / 12) / 2 + (5 / 12 + 1) / 2 + (H - 2)) / H
    assert R[0] == pytest.approx(expected, abs=1e-12)


def test_big_battery_saturates(radial):
    rec = island_outage(radial)
    R = replay_with_ders(rec, DERPlan((battery(5, 7 * 1.2 * H),)), radial)
    assert R[0] == 1.0


def test_half_power_serves_half(radial):
    rec = island_outage(radial)
    R = replay_with_ders(rec, DERPlan((battery(4 - 1, 4.2),)), radial)
    P = np.array([1] + [(5 + 3.5) / 12] * 4 + [1] * (H - 4))
    assert R[0] == pytest.approx(trapezoid_resilience(P, H), abs=1e-12)


def test_device_on_grid_side_does_nothing(radial):
    rec = island_outage(radial)
    R = replay_with_ders(rec, DERPlan((battery(1, 500.0), solar(2, 500.0))), radial)
    assert R[0] == rec.area_resilience[0]


def test_missing_node_rejected(radial):
    with pytest.raises(ValueError):
        replay_with_ders(island_outage(radial), DERPlan((battery(99, 60.0),)), radial)


def test_replay_matches_brute_force(testbed_graph, testbed_episodes):
    g = testbed_graph
    _, records = testbed_episodes
    rng = np.random.default_rng(4)
    counts = np.zeros(g.n_nodes)
    for rec in records[:40]:
        counts += EpisodeReplay(rec, g).outages(g)
    w = weights_from_counts(g, counts)
    for k, rec in enumerate(records[:12]):
        chosen = sorted({w.draw(rng) for _ in range(8)})
        plan = DERPlan(tuple(DERPlacement(n, DERKind(rng.choice(["solar", "battery"])),
                                          float(rng.uniform(5, 80))) for n in chosen))
        fast = replay_with_ders(rec, plan, g)
        slow = brute_force_replay(rec, plan, g)
        np.testing.assert_allclose(fast, slow, rtol=0, atol=1e-12)
        assert np.all(fast >= rec.area_resilience - 1e-15)


def test_more_capacity_never_hurts(testbed_graph, testbed_episodes):
    g = testbed_graph
    _, records = testbed_episodes
    cfg = GAConfig()
    ev = FitnessEvaluator(g, records, cfg)
    w = weights_from_counts(g, ev.outage_counts)
    rng = np.random.default_rng(2)
    for _ in range(5):
        a = random_plan(w, g, cfg, rng)
        bigger = DERPlan(tuple(DERPlacement(p.node, p.kind, min(cfg.cap_max, p.capacity * 1.5))
                               for p in a.placements))
        extra = [n for n in w.nodes.tolist() if n not in a.nodes][:1]
        more = DERPlan(a.placements + (battery(extra[0], 500.0),))
        fa = ev(a)
        assert ev(bigger) >= fa
        if len(more.placements) <= cfg.max_locations:
            assert ev(more) >= fa


# -- fitness ----------------------------------------------------------------------------

def test_empty_plan_fitness_is_worst_area(testbed_graph, testbed_episodes):
    report, records = testbed_episodes
    assert fitness(DERPlan(), records, testbed_graph, 0.8) == pytest.approx(report.R.min(), abs=1e-12)
    assert fitness(DERPlan(), records, testbed_graph, 0.8, areas=[1]) == pytest.approx(report.R[1], abs=1e-12)


def test_fitness_deterministic_and_infeasible(testbed_graph, testbed_episodes):
    _, records = testbed_episodes
    g = testbed_graph
    cfg = GAConfig()
    ev = FitnessEvaluator(g, records, cfg)
    plan = DERPlan((battery(700, 300.0), solar(900, 200.0)))
    assert ev(plan) == FitnessEvaluator(g, records, cfg)(plan)
    assert ev(DERPlan((battery(700, 10.0),))) == -np.inf
    assert ev(DERPlan((battery(700, 100.0), solar(700, 100.0)))) == -np.inf
    assert ev(DERPlan((battery(0, 100.0),))) == -np.inf
    budget = GAConfig(budget=1.0)
    assert FitnessEvaluator(g, records[:5], budget)(plan) == -np.inf


def test_area_scores_use_weighted_mean(testbed_graph, testbed_episodes):
    _, records = testbed_episodes
    ev = FitnessEvaluator(testbed_graph, records, GAConfig())
    plan = DERPlan((battery(600, 800.0),))
    m = ev.episode_matrix(plan)
    scores = ev.area_scores(plan)
    for a in range(3):
        assert scores[a] == pytest.approx(aggregate_values(m[:, a], ev.gust[:, a], 0.8), abs=1e-15)


def test_replay_subsample(testbed_graph, testbed_episodes):
    _, records = testbed_episodes
    ev = FitnessEvaluator(testbed_graph, records, GAConfig(replay_subsample=10))
    assert len(ev.replays) == 10


# -- location sampling ----------------------------------------------------------------------

def test_degree_scaling(radial):
    counts = np.zeros(radial.n_nodes)
    counts[[2, 4]] = 5  # P2 has degree 3, L4 degree 1
    w = weights_from_counts(radial, counts).as_dict()
    assert set(w) == {1, 2, 3, 4, 5}
    assert w[2] == pytest.approx(0.75, abs=1e-5)
    assert w[4] == pytest.approx(0.25, abs=1e-5)
    assert w[1] == pytest.approx(1e-6, rel=1e-3)
    assert sum(w.values()) == pytest.approx(1.0, abs=1e-12)
    d = weights_from_counts(radial, counts, "divide").as_dict()
    assert d[2] == pytest.approx(0.25, abs=1e-5) and d[4] == pytest.approx(0.75, abs=1e-5)


def test_uniform_fallback(radial):
    w = weights_from_counts(radial, np.zeros(radial.n_nodes))
    np.testing.assert_allclose(w.probs, 0.2)


def test_sampling_weights_from_store(testbed_graph, testbed_episodes):
    _, records = testbed_episodes
    w = sampling_weights(records, testbed_graph)
    assert np.all(w.probs > 0) and w.probs.sum() == pytest.approx(1.0)
    assert not np.isin(testbed_graph.substations, w.nodes).any()
    with pytest.raises(ValueError):
        sampling_weights([], testbed_graph)


def test_draw_frequencies(testbed_graph, testbed_episodes):
    w = sampling_weights(testbed_episodes[1], testbed_graph)
    rng = np.random.default_rng(0)
    draws = np.array([w.draw(rng) for _ in range(100_000)])
    freq = np.bincount(np.searchsorted(w.nodes, draws), minlength=len(w.nodes)) / len(draws)
    assert 0.5 * np.abs(freq - w.probs).sum() < 0.05


def test_rejection_rule():
    rng = np.random.default_rng(1)
    assert not any(proximity_accept(1, rng) for _ in range(1000))
    assert not proximity_accept(0, rng)
    assert all(proximity_accept(np.inf, rng) for _ in range(100))
    rejected = sum(not proximity_accept(4, rng) for _ in range(10_000))
    assert abs(rejected / 10_000 - 0.25) < 0.02


def test_hop_distances(radial):
    np.testing.assert_array_equal(hop_distances(radial, [5]), [4, 3, 2, 1, 3, 0])
    assert np.isinf(hop_distances(radial, [])).all()


def test_first_draw_accepted_when_nothing_selected(radial):
    w = weights_from_counts(radial, np.arange(radial.n_nodes, dtype=float))
    a, b = np.random.default_rng(5), np.random.default_rng(5)
    assert propose_location(w, [], radial, a) == w.draw(b)


def test_never_proposes_selected_node(radial):
    w = weights_from_counts(radial, np.ones(radial.n_nodes))
    rng = np.random.default_rng(0)
    for _ in range(200):
        assert propose_location(w, [2, 3], radial, rng) not in (2, 3)


# -- genetic algorithm --------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_ga(testbed_graph, testbed_episodes):
    cfg = GAConfig(population=10, generations=6)
    ev = FitnessEvaluator(testbed_graph, testbed_episodes[1][:60], cfg)
    return cfg, ev


def test_operators_respect_constraints(testbed_graph, small_ga):
    cfg, ev = small_ga
    g = testbed_graph
    w = weights_from_counts(g, ev.outage_counts)
    rng = np.random.default_rng(3)
    for _ in range(30):
        a, b = random_plan(w, g, cfg, rng), random_plan(w, g, cfg, rng)
        assert not a.violations(g, cfg)
        c = mutate(crossover(a, b, g, rng), w, g, cfg, rng)
        assert not c.violations(g, cfg)
        lo, hi = sorted((len(a.placements), len(b.placements)))
        assert 1 <= len(c.placements) <= hi


def test_evolve_history_and_determinism(testbed_graph, small_ga):
    cfg, ev = small_ga
    r1 = evolve(testbed_graph, None, cfg, np.random.default_rng(8), evaluator=ev)
    r2 = evolve(testbed_graph, None, cfg, np.random.default_rng(8), evaluator=ev)
    assert r1.history == r2.history
    assert [row[0] for row in r1.history] == list(range(cfg.generations + 1))
    best = [row[1] for row in r1.history]
    assert all(b2 >= b1 for b1, b2 in zip(best, best[1:]))
    assert r1.best_fitness == best[-1] == ev(r1.best)
    assert r1.best_fitness >= r1.baseline
    for plan in r1.evaluated:
        assert not plan.violations(testbed_graph, cfg)


def test_plan_json_round_trip():
    plan = DERPlan((battery(3, 120.5), solar(9, 50.0)))
    assert DERPlan.from_json(plan.to_json()) == plan
    assert plan.cost(GAConfig()) == 120.5 * 1500 + 50 * 1000
