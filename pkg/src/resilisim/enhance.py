"""Solar and battery siting/sizing with a customised genetic algorithm.

A plan places up to ``max_locations`` devices on pole or load nodes. Its
fitness is found by replaying the stored estimation episodes with the
devices installed and taking the worst area's gust-weighted resilience.

Devices only help while they sit in an island, i.e. a component cut off
from every substation. Batteries discharge whenever islanded and charged;
solar produces its flat rating only once the storm is over. The island's
served share is ``min(1, supply / demand)`` with demand proportional to
customer count.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
import multiprocessing as mp

import numpy as np
from scipy.sparse.csgraph import dijkstra

from .network import NetworkGraph, NodeKind
from .simulation import ServiceState, aggregate_values, trapezoid_resilience

log = logging.getLogger(__name__)


class DERKind(str, Enum):
    SOLAR = "solar"
    BATTERY = "battery"


@dataclass(frozen=True)
class DERPlacement:
    node: int
    kind: DERKind
    capacity: float  # kW


@dataclass(frozen=True)
class DERPlan:
    placements: tuple = ()

    def key(self):
        return tuple(sorted((p.node, p.kind.value, p.capacity) for p in self.placements))

    @property
    def nodes(self):
        return [p.node for p in self.placements]

    def cost(self, cfg: "GAConfig") -> float:
        unit = {DERKind.SOLAR: cfg.unit_cost_solar, DERKind.BATTERY: cfg.unit_cost_battery}
        return float(sum(p.capacity * unit[p.kind] for p in self.placements))

    def violations(self, g: NetworkGraph, cfg: "GAConfig") -> list[str]:
        out = []
        if len(self.placements) > cfg.max_locations:
            out.append(f"{len(self.placements)} locations exceed the limit of {cfg.max_locations}")
        nodes = self.nodes
        if len(set(nodes)) != len(nodes):
            out.append("two placements share a node")
        for p in self.placements:
            if not 0 <= p.node < g.n_nodes:
                out.append(f"node {p.node} does not exist")
            elif g.kind[p.node] == NodeKind.SUBSTATION:
                out.append(f"node {p.node} is a substation")
            if not cfg.cap_min <= p.capacity <= cfg.cap_max:
                out.append(f"capacity {p.capacity} kW at node {p.node} outside limits")
        if cfg.budget is not None and self.cost(cfg) > cfg.budget:
            out.append("plan exceeds budget")
        return out

    def to_json(self):
        return [{"node_id": p.node, "kind": p.kind.value, "capacity_kw": p.capacity} for p in self.placements]

    @classmethod
    def from_json(cls, items):
        return cls(tuple(DERPlacement(int(d["node_id"]), DERKind(d["kind"]), float(d["capacity_kw"]))
                         for d in items))


@dataclass
class GAConfig:
    population: int = 50
    generations: int = 100
    tournament: int = 4
    p_loc: float = 0.2
    p_cap: float = 0.3
    p_kind: float = 0.05
    max_locations: int = 20
    cap_min: float = 50.0
    cap_max: float = 2000.0
    kw_per_customer: float = 1.2
    storage_hours: float = 4.0
    replay_subsample: int | None = None
    budget: float | None = None
    unit_cost_solar: float = 1_000.0  # per kW, reporting unless a budget is set
    unit_cost_battery: float = 1_500.0
    degree_scaling: str = "multiply"  # or "divide"
    max_attempts: int = 100


# -- episode replay ---------------------------------------------------------

class EpisodeReplay:
    """Plan-independent reconstruction of one stored episode.

    Rebuilds the hourly service timeline from the failure and repair logs
    alone, and keeps what a DER replay needs: which nodes can ever be
    islanded and the order in which their components join up again.
    """

    def __init__(self, rec, g: NetworkGraph):
        self.duration = D = int(rec.duration)
        self.horizon = H = int(rec.horizon)
        self.totals = np.asarray(rec.area_totals, dtype=np.int64)
        self.n_areas = len(self.totals)
        failed = rec.failures[:, 0].astype(np.int64)
        intact = np.ones(g.n_edges, dtype=bool)
        intact[failed] = False
        base = ServiceState(g, intact)
        labels = base.labels
        self.labels = labels  # dropped by callers that cache many replays
        self.n_comp = len(base.parent)

        has_sub = np.zeros(self.n_comp, dtype=bool)
        has_sub[labels[g.substations]] = True
        self.has_sub = has_sub.tolist()
        island = np.flatnonzero(~has_sub[labels])
        self.island_nodes = island
        self.island_comp = labels[island]
        self.island_customers = {c: dict(d) for c, d in base.unserved.items() if not has_sub[c]}

        fail_hour = dict(zip(failed.tolist(), rec.failures[:, 1].tolist()))
        self.storm_unions = [[] for _ in range(D)]
        for e, h in fail_hour.items():
            self.storm_unions[h].append((int(labels[g.ea[e]]), int(labels[g.eb[e]])))
        reps = sorted(((int(t), int(e)) for e, t in rec.repairs.tolist()))
        self.t_end = min(H, max([D] + [t for t, _ in reps]))
        self.repair_unions: dict[int, list] = {}
        for t, e in reps:
            if t <= self.t_end:
                self.repair_unions.setdefault(t, []).append((int(labels[g.ea[e]]), int(labels[g.eb[e]])))

        # baseline service, rebuilt from the event logs
        rows = [None] * (self.t_end + 1)
        rows[0] = self.totals.tolist()
        st = base.copy()
        for t in range(D, 0, -1):
            if t <= self.t_end:
                rows[t] = list(st.served)
            if t > 1:
                for ca, cb in self.storm_unions[t - 1]:
                    st.union(ca, cb)
        st = base
        for t in range(D + 1, self.t_end + 1):
            for ca, cb in self.repair_unions.get(t, ()):
                st.union(ca, cb)
            rows[t] = list(st.served)
        self.baseline = np.array(rows, dtype=np.int64).T
        self.outage_nodes = None
        self.base_R = self._resilience(None)

    def outages(self, g: NetworkGraph) -> np.ndarray:
        """Bool mask of nodes cut from their own substation at the worst point."""
        node_area = np.maximum(g.area, 0)
        own = self.labels[g.substations[node_area]]
        return (self.labels != own) & (g.area >= 0)

    def forget_labels(self):
        self.labels = None

    def _resilience(self, extra):
        served = self.baseline.astype(float)
        if extra is not None:
            served = served + extra
        P = np.ones((self.n_areas, self.horizon + 1))
        has = self.totals > 0
        P[has, :served.shape[1]] = served[has] / self.totals[has, None]
        return trapezoid_resilience(P, self.horizon)

    def resilience(self, plan: DERPlan, kw_per_customer: float = 1.2, storage_hours: float = 4.0):
        """Per-area resilience of this episode with ``plan`` installed."""
        if plan is None or not plan.placements:
            return self.base_R.copy()
        devices = []
        for p in plan.placements:
            k = np.searchsorted(self.island_nodes, p.node)
            if k < len(self.island_nodes) and self.island_nodes[k] == p.node:
                devices.append((int(self.island_comp[k]), p))
        if not devices:
            return self.base_R.copy()

        D, T = self.duration, self.t_end
        comps = [c for c, _ in devices]
        snap = [None] * (T + 1)  # per hour: root per device, islands' customers

        parent = list(range(self.n_comp))
        has_sub = list(self.has_sub)
        cust = {c: dict(d) for c, d in self.island_customers.items()}

        def find(c):
            root = c
            while parent[root] != root:
                root = parent[root]
            while parent[c] != root:
                parent[c], c = root, parent[c]
            return root

        def union(a, b):
            ra, rb = find(a), find(b)
            if ra == rb:
                return
            parent[rb] = ra
            has_sub[ra] = has_sub[ra] or has_sub[rb]
            db = cust.pop(rb, None)
            if db:
                da = cust.setdefault(ra, {})
                for area, k in db.items():
                    da[area] = da.get(area, 0) + k

        def take():
            roots = [find(c) for c in comps]
            # copies: later unions update the live dicts in place
            return roots, {r: dict(cust.get(r) or {}) for r in set(roots) if not has_sub[r]}

        for t in range(D, 0, -1):
            if t <= T:
                snap[t] = take()
            if t > 1:
                for ca, cb in self.storm_unions[t - 1]:
                    union(ca, cb)
        parent = list(range(self.n_comp))
        has_sub = list(self.has_sub)
        cust = {c: dict(d) for c, d in self.island_customers.items()}
        for t in range(D + 1, T + 1):
            for ca, cb in self.repair_unions.get(t, ()):
                union(ca, cb)
            snap[t] = take()

        energy = [p.capacity * storage_hours if p.kind == DERKind.BATTERY else 0.0 for _, p in devices]
        start_energy = sum(energy)
        discharged = 0.0
        extra = np.zeros((self.n_areas, T + 1))
        for t in range(1, T + 1):
            roots, islands = snap[t]
            groups: dict[int, list[int]] = {}
            for i, r in enumerate(roots):
                if r in islands and islands[r]:
                    groups.setdefault(r, []).append(i)
            for r, members in groups.items():
                demand_by_area = islands[r]
                demand = kw_per_customer * sum(demand_by_area.values())
                if demand <= 0:
                    continue
                solar = 0.0
                if t > D:
                    solar = sum(devices[i][1].capacity for i in members if devices[i][1].kind == DERKind.SOLAR)
                need = max(0.0, demand - solar)
                for i in sorted(members, key=lambda i: devices[i][1].node):
                    if need <= 0:
                        break
                    p = devices[i][1]
                    if p.kind != DERKind.BATTERY:
                        continue
                    d = min(p.capacity, energy[i], need)
                    energy[i] -= d
                    discharged += d
                    need -= d
                frac = min(1.0, (demand - need) / demand)
                for area, k in demand_by_area.items():
                    extra[area, t] += frac * k
        assert discharged <= start_energy * (1 + 1e-12) + 1e-9, "battery energy not conserved"
        return self._resilience(extra)


def replay_with_ders(rec, plan: DERPlan, g: NetworkGraph, kw_per_customer: float = 1.2,
                     storage_hours: float = 4.0) -> np.ndarray:
    """Per-area resilience of a stored episode with ``plan`` installed."""
    for p in plan.placements:
        if not 0 <= p.node < g.n_nodes:
            raise ValueError(f"plan references missing node {p.node}")
    return EpisodeReplay(rec, g).resilience(plan, kw_per_customer, storage_hours)


# -- location sampling -------------------------------------------------------

@dataclass
class SamplingWeights:
    nodes: np.ndarray  # candidate node ids
    probs: np.ndarray

    def __post_init__(self):
        self._cdf = np.cumsum(self.probs)
        self._cdf /= self._cdf[-1]

    def draw(self, rng) -> int:
        k = int(np.searchsorted(self._cdf, rng.random(), side="right"))
        return int(self.nodes[min(k, len(self.nodes) - 1)])

    def as_dict(self):
        return dict(zip(self.nodes.tolist(), self.probs.tolist()))


def candidate_nodes(g: NetworkGraph) -> np.ndarray:
    return np.flatnonzero((g.kind != NodeKind.SUBSTATION) & (g.area >= 0))


def weights_from_counts(g: NetworkGraph, counts, degree_scaling="multiply", eps=1e-6) -> SamplingWeights:
    """Outage counts scaled by node degree, normalised, with an ``eps`` floor."""
    nodes = candidate_nodes(g)
    c = np.asarray(counts, dtype=float)[nodes]
    deg = g.degree[nodes].astype(float)
    if degree_scaling == "multiply":
        raw = c * deg
    elif degree_scaling == "divide":
        raw = np.divide(c, deg, out=np.zeros_like(c), where=deg > 0)
    else:
        raise ValueError(f"unknown degree scaling {degree_scaling!r}")
    if raw.sum() <= 0:
        probs = np.full(len(nodes), 1.0 / len(nodes))
    else:
        probs = raw / raw.sum()
        probs = (probs + eps) / (1.0 + eps * len(nodes))
    return SamplingWeights(nodes, probs)


def outage_counts(records, g: NetworkGraph) -> np.ndarray:
    counts = np.zeros(g.n_nodes, dtype=np.int64)
    for rec in records:
        counts += EpisodeReplay(rec, g).outages(g)
    return counts


def sampling_weights(store, g: NetworkGraph, degree_scaling="multiply") -> SamplingWeights:
    records = list(store)
    if not records:
        raise ValueError("episode store is empty")
    return weights_from_counts(g, outage_counts(records, g), degree_scaling)


def hop_distances(g: NetworkGraph, selected) -> np.ndarray:
    """Hops from every node to the nearest selected node (inf if none)."""
    if not selected:
        return np.full(g.n_nodes, np.inf)
    return dijkstra(g.csr(), directed=False, indices=sorted(selected), unweighted=True, min_only=True)


def proximity_accept(hops: float, rng) -> bool:
    """Keep a candidate ``hops`` away from the nearest chosen site w.p. 1 - 1/hops."""
    if hops == 0:
        return False
    if not math.isfinite(hops):
        return True
    return rng.random() >= 1.0 / hops


def propose_location(w: SamplingWeights, selected, g: NetworkGraph, rng, max_attempts: int = 100,
                     hops: np.ndarray | None = None) -> int:
    selected = set(selected)
    if hops is None:
        hops = hop_distances(g, selected)
    last_free = None
    for _ in range(max_attempts):
        node = w.draw(rng)
        if node not in selected:
            last_free = node
        if proximity_accept(hops[node], rng):
            return node
    if last_free is not None:
        return last_free
    free = [n for n in w.nodes[np.argsort(-w.probs, kind="stable")].tolist() if n not in selected]
    if not free:
        raise ValueError("no candidate locations left")
    return free[0]


# -- fitness -------------------------------------------------------------------

class FitnessEvaluator:
    """Replays a fixed set of episodes for any number of plans."""

    def __init__(self, g: NetworkGraph, records, cfg: GAConfig, lam: float = 0.8, areas=None):
        self.g = g
        self.cfg = cfg
        self.lam = lam
        self.areas = list(range(g.n_areas)) if areas is None else list(areas)
        records = list(records)
        if not records:
            raise ValueError("episode store is empty")
        if cfg.replay_subsample and cfg.replay_subsample < len(records):
            records = records[:cfg.replay_subsample]
        self.replays = []
        counts = np.zeros(g.n_nodes, dtype=np.int64)
        for rec in records:
            rp = EpisodeReplay(rec, g)
            counts += rp.outages(g)
            rp.forget_labels()
            self.replays.append(rp)
        self.outage_counts = counts
        self.gust = np.array([rec.area_gust for rec in records], dtype=bool)
        self._memo = {}

    def episode_matrix(self, plan: DERPlan) -> np.ndarray:
        return np.array([rp.resilience(plan, self.cfg.kw_per_customer, self.cfg.storage_hours)
                         for rp in self.replays])

    def area_scores(self, plan: DERPlan) -> np.ndarray:
        m = self.episode_matrix(plan)
        return np.array([aggregate_values(m[:, a], self.gust[:, a], self.lam) for a in range(m.shape[1])])

    def __call__(self, plan: DERPlan) -> float:
        key = plan.key()
        if key in self._memo:
            return self._memo[key]
        if plan.violations(self.g, self.cfg):
            score = -math.inf
        else:
            score = float(self.area_scores(plan)[self.areas].min())
        self._memo[key] = score
        return score

    def many(self, plans, threads: int = 1) -> list[float]:
        todo = []
        seen = set()
        for p in plans:
            k = p.key()
            if k not in self._memo and k not in seen:
                seen.add(k)
                todo.append(p)
        threads = threads or os.cpu_count() or 1
        if threads > 1 and len(todo) > 1:
            ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
            global _EVAL
            _EVAL = self
            with ProcessPoolExecutor(threads, mp_context=ctx) as pool:
                for p, s in zip(todo, pool.map(_eval_plan, todo, chunksize=max(1, len(todo) // (4 * threads)))):
                    self._memo[p.key()] = s
        return [self(p) for p in plans]


_EVAL = None


def _eval_plan(plan):
    return _EVAL(plan)


def fitness(plan: DERPlan, store, g: NetworkGraph, lam: float = 0.8, cfg: GAConfig | None = None,
            areas=None) -> float:
    return FitnessEvaluator(g, store, cfg or GAConfig(), lam, areas)(plan)


# -- genetic algorithm -------------------------------------------------------------

@dataclass
class GAResult:
    best: DERPlan
    best_fitness: float
    baseline: float
    history: list  # (generation, best_fitness, mean_fitness)
    evaluated: list = field(default_factory=list)


def random_plan(w: SamplingWeights, g: NetworkGraph, cfg: GAConfig, rng) -> DERPlan:
    n = int(rng.integers(1, cfg.max_locations + 1))
    chosen = []
    for _ in range(min(n, len(w.nodes))):
        node = propose_location(w, chosen, g, rng, cfg.max_attempts)
        chosen.append(node)
    placements = []
    for node in chosen:
        kind = DERKind.SOLAR if rng.random() < 0.5 else DERKind.BATTERY
        cap = float(rng.uniform(cfg.cap_min, cfg.cap_max))
        placements.append(DERPlacement(node, kind, cap))
    return DERPlan(tuple(placements))


def crossover(a: DERPlan, b: DERPlan, g: NetworkGraph, rng) -> DERPlan:
    """Uniform placement-level crossover with proximity rejection on the child."""
    pool = list(a.placements) + list(b.placements)
    lo, hi = sorted((len(a.placements), len(b.placements)))
    target = int(rng.integers(max(lo, 1), max(hi, 1) + 1))
    child: list[DERPlacement] = []
    nodes: set[int] = set()
    hops = hop_distances(g, nodes)
    for i in rng.permutation(len(pool)).tolist():
        p = pool[i]
        if p.node in nodes:
            continue
        if proximity_accept(hops[p.node], rng):
            child.append(p)
            nodes.add(p.node)
            if len(child) >= target:
                break
            hops = hop_distances(g, nodes)
    if not child:
        child = [pool[0]]
    return DERPlan(tuple(child))


def mutate(plan: DERPlan, w: SamplingWeights, g: NetworkGraph, cfg: GAConfig, rng) -> DERPlan:
    out = list(plan.placements)
    for i in range(len(out)):
        r_loc, r_cap, r_kind = rng.random(3)
        p = out[i]
        if r_loc < cfg.p_loc:
            others = [q.node for j, q in enumerate(out) if j != i]
            p = replace(p, node=propose_location(w, others, g, rng, cfg.max_attempts))
        if r_cap < cfg.p_cap:
            cap = p.capacity * (1.0 + rng.uniform(-0.2, 0.2))
            p = replace(p, capacity=float(min(cfg.cap_max, max(cfg.cap_min, cap))))
        if r_kind < cfg.p_kind:
            p = replace(p, kind=DERKind.BATTERY if p.kind == DERKind.SOLAR else DERKind.SOLAR)
        out[i] = p
    return DERPlan(tuple(out))


def _tournament(pool, k, rng):
    picks = rng.integers(0, len(pool), size=min(k, len(pool)))
    best = max(picks.tolist(), key=lambda i: (pool[i][1], -i))
    return pool[best][0]


def evolve(g: NetworkGraph, store, cfg: GAConfig, rng, lam: float = 0.8, areas=None,
           threads: int = 1, evaluator: FitnessEvaluator | None = None) -> GAResult:
    """Search for the plan maximising the worst area's resilience.

    Selection draws tournaments from the current population together with
    the archive of every earlier generation's best plan; the archive best is
    carried over unchanged, so the best-so-far score never drops.
    """
    ev = evaluator or FitnessEvaluator(g, store, cfg, lam, areas)
    w = weights_from_counts(g, ev.outage_counts, cfg.degree_scaling)
    baseline = ev(DERPlan())

    population = [random_plan(w, g, cfg, rng) for _ in range(cfg.population)]
    scores = ev.many(population, threads)
    evaluated = {p.key(): p for p in population}
    archive = []
    history = []

    def record(gen, pop, sc):
        i = int(np.argmax(sc))
        archive.append((pop[i], sc[i]))
        best = max(archive, key=lambda x: x[1])
        finite = [s for s in sc if math.isfinite(s)]
        mean = float(np.mean(finite)) if finite else -math.inf
        history.append((gen, best[1], mean))
        log.info("generation %d: best %.6f mean %.6f", gen, best[1], mean)

    record(0, population, scores)
    for gen in range(1, cfg.generations + 1):
        pool = list(zip(population, scores)) + archive
        elite = max(archive, key=lambda x: x[1])[0]
        nxt = [elite]
        while len(nxt) < cfg.population:
            a = _tournament(pool, cfg.tournament, rng)
            b = _tournament(pool, cfg.tournament, rng)
            child = mutate(crossover(a, b, g, rng), w, g, cfg, rng)
            nxt.append(child)
        population = nxt
        scores = ev.many(population, threads)
        for p in population:
            evaluated.setdefault(p.key(), p)
        record(gen, population, scores)

    best_plan, best_score = max(archive, key=lambda x: x[1])
    return GAResult(best_plan, best_score, baseline, history, list(evaluated.values()))
