"""Monte Carlo resilience estimation.

An episode samples a storm, breaks lines hour by hour, then lets repair
crews restore the most critical line first once the storm has passed.
Served customers per substation area are tracked on an hourly grid and
turned into a trapezoid resilience value per area.

Connectivity is never recomputed from scratch per event. The storm only
removes lines and restoration only adds them back, so the state with every
storm failure removed is the worst state of the episode. Components of that
state are computed once; every other state is reached from it by unions,
going backwards through the storm hours and forwards through restoration.
"""
from __future__ import annotations

import heapq
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import multiprocessing as mp

import numpy as np
from scipy.sparse.csgraph import connected_components

from .fragility import Fragility, sample_failures
from .network import NetworkGraph, NodeKind
from .weather import WeatherConfig, WindDistribution, default_distributions, sample_storm

log = logging.getLogger(__name__)

# (master_seed, purpose, index) -> independent stream
STORM, DAMAGE, REPAIR, GA = 1, 2, 3, 4


def derive_seed(master_seed: int, purpose: int, index: int = 0) -> int:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(purpose, int(index)))
    return int(ss.generate_state(1, np.uint64)[0])


def stream(master_seed: int, purpose: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, purpose, index))


@dataclass(frozen=True)
class CrewPool:
    n_crews: int = 5
    repair_time_min: int = 1
    repair_time_max: int = 4

    def __post_init__(self):
        if self.n_crews < 1:
            raise ValueError("need at least one crew")
        if not 0 < self.repair_time_min <= self.repair_time_max:
            raise ValueError("repair times must satisfy 0 < min <= max")


@dataclass
class SimulationConfig:
    horizon_h: int = 168
    crews: CrewPool = field(default_factory=CrewPool)
    fragility: Fragility = field(default_factory=Fragility)
    weather: WeatherConfig = field(default_factory=WeatherConfig)
    gust: WindDistribution | None = None
    sustained: WindDistribution | None = None

    def distributions(self):
        if self.gust is None or self.sustained is None:
            gust, sustained = default_distributions()
            return self.gust or gust, self.sustained or sustained
        return self.gust, self.sustained


@dataclass
class EpisodeRecord:
    """Replayable log of one episode.

    ``served`` holds customers served per area for hours ``0..len-1``; past
    its end every area is fully served. ``failures``/``repairs`` are
    ``(edge, hour)`` rows; a failure at storm hour ``h`` shows from ``h + 1``.
    """

    episode_index: int
    scenario_seed: int
    duration: int
    failures: np.ndarray
    repairs: np.ndarray
    served: np.ndarray  # (n_areas, T + 1) int64
    area_totals: np.ndarray
    area_gust: np.ndarray
    horizon: int

    @property
    def area_curves(self) -> np.ndarray:
        return served_curves(self.served, self.area_totals, self.horizon)

    @property
    def area_resilience(self) -> np.ndarray:
        return trapezoid_resilience(self.area_curves, self.horizon)


def served_curves(served, totals, horizon) -> np.ndarray:
    """Served fractions on hours ``0..horizon``, padded with full service."""
    served = np.asarray(served, dtype=float)
    totals = np.asarray(totals)
    n = min(served.shape[1], horizon + 1)
    out = np.ones((len(totals), horizon + 1))
    has = totals > 0
    out[has, :n] = served[has, :n] / totals[has, None]
    return out


def trapezoid_resilience(curve, horizon: int):
    """Normalised area under the served-fraction curve, unit hourly steps.

    ``curve`` holds ``P(0..horizon)``; missing trailing hours count as full
    service. Works along the last axis.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    p = np.asarray(curve, dtype=float)
    if p.shape[-1] < horizon + 1:
        pad = np.ones(p.shape[:-1] + (horizon + 1 - p.shape[-1],))
        p = np.concatenate([p, pad], axis=-1)
    p = p[..., :horizon + 1]
    area = 0.5 * (p[..., :-1] + p[..., 1:]).sum(axis=-1)
    return area / horizon


# -- connectivity bookkeeping --------------------------------------------

class ServiceState:
    """Union-find over components of a damaged graph with per-area service.

    Customers count as served when their load node shares a component with
    the substation of their own area. Only line additions are supported.
    """

    def __init__(self, g: NetworkGraph, intact: np.ndarray):
        n_comp, labels = connected_components(g.csr(intact), directed=False)
        self.labels = labels
        self.parent = list(range(n_comp))
        self.size = np.bincount(labels, minlength=n_comp).tolist()
        self.subs: dict[int, set] = {}
        self.unserved: dict[int, dict] = {}
        sub_comp = labels[g.substations]
        for a, c in enumerate(sub_comp.tolist()):
            self.subs.setdefault(c, set()).add(a)
        loads, load_area, load_cust = _assigned_loads(g)
        lc = labels[loads]
        ok = lc == sub_comp[load_area]
        self.served = np.bincount(load_area[ok], weights=load_cust[ok],
                                  minlength=g.n_areas).astype(np.int64).tolist()
        bad = np.flatnonzero(~ok)
        for c, a, k in zip(lc[bad].tolist(), load_area[bad].tolist(), load_cust[bad].tolist()):
            d = self.unserved.setdefault(c, {})
            d[a] = d.get(a, 0) + k
        self.version: dict[int, int] = {}

    def copy(self) -> "ServiceState":
        new = object.__new__(ServiceState)
        new.labels = self.labels
        new.parent = list(self.parent)
        new.size = list(self.size)
        new.subs = {k: set(v) for k, v in self.subs.items()}
        new.unserved = {k: dict(v) for k, v in self.unserved.items()}
        new.served = list(self.served)
        new.version = dict(self.version)
        return new

    def find(self, c: int) -> int:
        parent = self.parent
        root = c
        while parent[root] != root:
            root = parent[root]
        while parent[c] != root:
            parent[c], c = root, parent[c]
        return root

    def node_root(self, node: int) -> int:
        return self.find(int(self.labels[node]))

    def gain(self, ru: int, rv: int) -> int:
        """Customers newly served if roots ``ru`` and ``rv`` were joined."""
        if ru == rv:
            return 0
        total = 0
        su, uv = self.subs.get(ru), self.unserved.get(rv)
        if su and uv:
            total += sum(uv.get(a, 0) for a in su)
        sv, uu = self.subs.get(rv), self.unserved.get(ru)
        if sv and uu:
            total += sum(uu.get(a, 0) for a in sv)
        return total

    def union(self, cu: int, cv: int):
        """Join two components; returns ``(survivor, absorbed, survivor_changed)``."""
        ru, rv = self.find(cu), self.find(cv)
        if ru == rv:
            return ru, None, False
        if self.size[ru] < self.size[rv] or (self.size[ru] == self.size[rv] and rv < ru):
            ru, rv = rv, ru
        subs, uns, served = self.subs, self.unserved, self.served
        su, sv = subs.get(ru), subs.get(rv)
        uu, uv = uns.get(ru), uns.get(rv)
        changed = False
        if su and uv:
            for a in su:
                k = uv.pop(a, 0)
                if k:
                    served[a] += k
        if sv and uu:
            for a in sv:
                k = uu.pop(a, 0)
                if k:
                    served[a] += k
                    changed = True
        if sv:
            if su is None:
                subs[ru] = sv
                changed = True
            elif not sv <= su:
                su |= sv
                changed = True
            del subs[rv]
        if uv:
            if uu is None:
                uu = uns[ru] = {}
            for a, k in uv.items():
                uu[a] = uu.get(a, 0) + k
            changed = True
        uns.pop(rv, None)
        if uu is not None and not uu:
            del uns[ru]
        self.parent[rv] = ru
        self.size[ru] += self.size[rv]
        if changed:
            self.version[ru] = self.version.get(ru, 0) + 1
        return ru, rv, changed


def _assigned_loads(g: NetworkGraph):
    cache = getattr(g, "_load_cache", None)
    if cache is None:
        loads = np.flatnonzero((g.kind == NodeKind.LOAD) & (g.area >= 0))
        cache = (loads, g.area[loads].astype(np.int64), g.customers[loads].astype(np.int64))
        g._load_cache = cache
    return cache


# -- stand-alone connectivity queries -------------------------------------

def served_customers(g: NetworkGraph, failed) -> np.ndarray:
    """Served customers per area with ``failed`` edges removed (from scratch)."""
    intact = np.ones(g.n_edges, dtype=bool)
    intact[np.asarray(list(failed), dtype=np.int64)] = False
    _, labels = connected_components(g.csr(intact), directed=False)
    loads, load_area, load_cust = _assigned_loads(g)
    ok = labels[loads] == labels[g.substations[load_area]]
    return np.bincount(load_area[ok], weights=load_cust[ok], minlength=g.n_areas).astype(np.int64)


def served_fraction(g: NetworkGraph, failed, area: int) -> float:
    total = g.area_customers()[area]
    if total == 0:
        return 1.0
    return float(served_customers(g, failed)[area] / total)


def criticality(g: NetworkGraph, failed, e: int) -> int:
    """Customers reconnected if failed line ``e`` alone were repaired now."""
    failed = set(int(x) for x in failed)
    if e not in failed:
        raise ValueError(f"edge {e} is not failed")
    before = served_customers(g, failed).sum()
    after = served_customers(g, failed - {e}).sum()
    return int(after - before)


# -- episodes --------------------------------------------------------------

def run_episode(g: NetworkGraph, dists, frag: Fragility, crews: CrewPool, cfg: SimulationConfig,
                master_seed: int, episode_index: int) -> EpisodeRecord:
    gust, sustained = dists
    scenario_seed = derive_seed(master_seed, STORM, episode_index)
    storm = sample_storm(g.area_positions(), g.grid, gust, sustained, cfg.weather,
                         np.random.default_rng(scenario_seed))
    damage_rng = stream(master_seed, DAMAGE, episode_index)
    D = storm.duration
    intact = np.ones(g.n_edges, dtype=bool)
    fail_hour = np.full(g.n_edges, -1, dtype=np.int64)
    for h in range(D):
        new = sample_failures(g, storm.hourly_fields[h], intact, frag, damage_rng)
        intact[new] = False
        fail_hour[new] = h
    failed = np.flatnonzero(fail_hour >= 0)
    failures = np.column_stack([failed, fail_hour[failed]])
    return simulate_outage(g, failures, D, crews, stream(master_seed, REPAIR, episode_index),
                           cfg.horizon_h, storm.area_gust, episode_index, scenario_seed)


def simulate_outage(g: NetworkGraph, failures, duration: int, crews: CrewPool, rng, horizon: int = 168,
                    area_gust=None, episode_index: int = 0, scenario_seed: int = 0) -> EpisodeRecord:
    """Service timeline and repair log for a given set of storm failures.

    ``failures`` holds ``(edge, storm hour)`` rows with hours in
    ``0..duration-1``; ``rng`` drives the repair durations.
    """
    failures = np.asarray(failures, dtype=np.int64).reshape(-1, 2)
    D, H = int(duration), int(horizon)
    if len(failures) and (failures[:, 1].min() < 0 or failures[:, 1].max() >= D):
        raise ValueError("failure hours must lie in 0..duration-1")
    if len(np.unique(failures[:, 0])) != len(failures):
        raise ValueError("an edge can fail only once per episode")
    if area_gust is None:
        area_gust = np.zeros(g.n_areas, dtype=bool)
    totals = g.area_customers()
    failed = failures[:, 0]
    if len(failed) == 0:
        served = totals[:, None].astype(np.int64).copy()
        return EpisodeRecord(episode_index, scenario_seed, D, failures, np.zeros((0, 2), np.int64),
                             served, totals, area_gust, H)
    fail_hour = np.full(g.n_edges, -1, dtype=np.int64)
    fail_hour[failed] = failures[:, 1]
    intact = fail_hour < 0

    base = ServiceState(g, intact)
    storm_rows = _storm_curve(base.copy(), g, failed, fail_hour, D)
    repairs, rest_rows = _restore(base, g, failed, D, crews, rng, H)

    rows = [totals.tolist()] + storm_rows + rest_rows
    t_end = min(H, len(rows) - 1)
    served = np.array(rows[:t_end + 1], dtype=np.int64).T
    return EpisodeRecord(episode_index, scenario_seed, D, failures, repairs, served, totals,
                         area_gust, H)


def _storm_curve(state: ServiceState, g, failed, fail_hour, D):
    """Served counts for hours 1..D by adding storm failures back in reverse."""
    by_hour = [[] for _ in range(D)]
    for e in failed.tolist():
        by_hour[fail_hour[e]].append(e)
    labels = state.labels
    ea, eb = g.ea, g.eb
    rows = [None] * D
    for t in range(D, 0, -1):
        rows[t - 1] = list(state.served)
        if t > 1:
            for e in by_hour[t - 1]:
                state.union(int(labels[ea[e]]), int(labels[eb[e]]))
    return rows


def _restore(state: ServiceState, g, failed, D, crews: CrewPool, rng, H):
    """Greedy most-critical-first repair after the storm.

    Returns the repair log and served counts for hours ``D+1 ..`` until all
    lines are back or the horizon is reached. Lines still down at the
    horizon are left out of the log.
    """
    labels = state.labels
    comp_a = labels[g.ea[failed]].tolist()
    comp_b = labels[g.eb[failed]].tolist()
    ends = {e: (ca, cb) for e, ca, cb in zip(failed.tolist(), comp_a, comp_b)}
    pending = set(ends)
    find, version = state.find, state.version
    root_edges: dict[int, list] = {}
    heap = []

    def push(e):
        ca, cb = ends[e]
        ru, rv = find(ca), find(cb)
        crit = state.gain(ru, rv)
        heap.append((-crit, e, ru, rv, version.get(ru, 0), version.get(rv, 0)))

    for e, (ca, cb) in ends.items():
        ru, rv = find(ca), find(cb)
        root_edges.setdefault(ru, []).append(e)
        if rv != ru:
            root_edges.setdefault(rv, []).append(e)
        push(e)
    heapq.heapify(heap)

    def push_live(e):
        ca, cb = ends[e]
        ru, rv = find(ca), find(cb)
        heapq.heappush(heap, (-state.gain(ru, rv), e, ru, rv, version.get(ru, 0), version.get(rv, 0)))

    def best():
        while heap:
            _, e, ru, rv, vu, vv = heapq.heappop(heap)
            if e not in pending:
                continue
            ca, cb = ends[e]
            cu, cv = find(ca), find(cb)
            if cu != ru or cv != rv or version.get(cu, 0) != vu or version.get(cv, 0) != vv:
                continue  # superseded by a fresher entry
            return e
        raise RuntimeError("repair queue exhausted with lines pending")

    t = D
    free = crews.n_crews
    busy = []
    repairs = []
    rows = []
    while pending or busy:
        while free and pending:
            e = best()
            pending.discard(e)
            rt = int(rng.integers(crews.repair_time_min, crews.repair_time_max + 1))
            heapq.heappush(busy, (t + rt, e))
            free -= 1
        t_next = busy[0][0]
        if t < H:
            current = list(state.served)
            rows.extend(current for _ in range(min(t_next, H + 1) - t - 1))
        t = t_next
        while busy and busy[0][0] == t:
            _, e = heapq.heappop(busy)
            repairs.append((e, t))
            free += 1
            ca, cb = ends[e]
            survivor, absorbed, changed = state.union(ca, cb)
            if absorbed is None:
                continue
            moved = root_edges.pop(absorbed, [])
            kept = root_edges.get(survivor, [])
            if changed:
                kept = [x for x in kept if x in pending]
                for x in kept:
                    push_live(x)
            moved = [x for x in moved if x in pending]
            for x in moved:
                push_live(x)
            kept.extend(moved)
            root_edges[survivor] = kept
        if t <= H:
            rows.append(list(state.served))
        if t >= H:
            break  # later repairs cannot change the metric
    return np.array(repairs, dtype=np.int64).reshape(-1, 2), rows


# -- aggregation ----------------------------------------------------------

def aggregate_values(values, gust, lam: float) -> float:
    """Gust-weighted mean of per-episode resilience values.

    Gust episodes carry total weight ``lam`` and the rest ``1 - lam``; if one
    group is empty the other group's plain mean is returned.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    values = np.asarray(values, dtype=float)
    gust = np.asarray(gust, dtype=bool)
    n = len(values)
    if n == 0:
        raise ValueError("no episodes to aggregate")
    n_g = int(gust.sum())
    if n_g == 0:
        return float(values.sum() / n)
    if n_g == n:
        return float(values.sum() / n)
    return float(lam / n_g * values[gust].sum() + (1.0 - lam) / (n - n_g) * values[~gust].sum())


def aggregate(records, area: int, lam: float = 0.8) -> float:
    records = list(records)
    if not records:
        raise ValueError("no episodes to aggregate")
    vals = [r.area_resilience[area] for r in records]
    gust = [bool(r.area_gust[area]) for r in records]
    return aggregate_values(vals, gust, lam)


@dataclass
class ResilienceReport:
    area_names: list[str]
    R: np.ndarray  # (n_areas,)
    n_gust: np.ndarray
    n_episodes: int
    lam: float
    episode_R: np.ndarray  # (N, n_areas)
    episode_gust: np.ndarray  # (N, n_areas)
    stride: int
    checkpoints: np.ndarray
    running: np.ndarray  # (n_areas, len(checkpoints))

    def stderr(self, n: int | None = None) -> np.ndarray:
        """Standard error of the weighted estimate using the first ``n`` episodes."""
        n = self.n_episodes if n is None else n
        vals, gust = self.episode_R[:n], self.episode_gust[:n]
        out = np.zeros(vals.shape[1])
        for a in range(vals.shape[1]):
            v, m = vals[:, a], gust[:, a]
            g, o = v[m], v[~m]
            if len(g) == 0 or len(o) == 0:
                out[a] = v.std(ddof=1) / np.sqrt(len(v)) if len(v) > 1 else 0.0
                continue
            var = 0.0
            if len(g) > 1:
                var += self.lam ** 2 * g.var(ddof=1) / len(g)
            if len(o) > 1:
                var += (1 - self.lam) ** 2 * o.var(ddof=1) / len(o)
            out[a] = np.sqrt(var)
        return out


def build_report(episode_R, episode_gust, lam, area_names, stride=10) -> ResilienceReport:
    episode_R = np.asarray(episode_R, dtype=float)
    episode_gust = np.asarray(episode_gust, dtype=bool)
    n, n_areas = episode_R.shape
    R = np.array([aggregate_values(episode_R[:, a], episode_gust[:, a], lam) for a in range(n_areas)])
    checkpoints = np.arange(stride, n + 1, stride)
    running = np.zeros((n_areas, len(checkpoints)))
    for a in range(n_areas):
        v, m = episode_R[:, a], episode_gust[:, a]
        cg = np.cumsum(np.where(m, v, 0.0))
        co = np.cumsum(np.where(m, 0.0, v))
        ng = np.cumsum(m)
        k = checkpoints - 1
        n_k = checkpoints
        g_k, o_k = ng[k], n_k - ng[k]
        with np.errstate(divide="ignore", invalid="ignore"):
            mixed = lam * cg[k] / g_k + (1 - lam) * co[k] / o_k
            plain = (cg[k] + co[k]) / n_k
        running[a] = np.where((g_k == 0) | (o_k == 0), plain, mixed)
    return ResilienceReport(list(area_names), R, episode_gust.sum(axis=0), n, lam, episode_R,
                            episode_gust, stride, checkpoints, running)


# -- estimation driver ------------------------------------------------------

_WORKER = {}


def _init_worker(g, cfg, dists, master_seed):
    _WORKER.update(g=g, cfg=cfg, dists=dists, seed=master_seed)


def _run_chunk(indices):
    w = _WORKER
    return [run_episode(w["g"], w["dists"], w["cfg"].fragility, w["cfg"].crews, w["cfg"], w["seed"], i)
            for i in indices]


def iter_episodes(g, cfg: SimulationConfig, n_episodes: int, master_seed: int, threads: int = 1,
                  start: int = 0, chunk: int = 16):
    """Yield episode records in index order, computed by ``threads`` workers."""
    dists = cfg.distributions()
    indices = list(range(start, start + n_episodes))
    threads = threads or os.cpu_count() or 1
    if threads <= 1:
        for i in indices:
            yield run_episode(g, dists, cfg.fragility, cfg.crews, cfg, master_seed, i)
        return
    chunks = [indices[k:k + chunk] for k in range(0, len(indices), chunk)]
    ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
    with ProcessPoolExecutor(threads, mp_context=ctx, initializer=_init_worker,
                             initargs=(g, cfg, dists, master_seed)) as pool:
        for recs in pool.map(_run_chunk, chunks):
            yield from recs


def estimate(g: NetworkGraph, cfg: SimulationConfig, n_episodes: int, master_seed: int,
             store=None, threads: int = 1, lam: float = 0.8, stride: int = 10):
    """Run ``n_episodes`` episodes, persist them and compute per-area resilience.

    ``store`` is any object with an ``append(record)`` method (an
    :class:`~resilisim.store.EpisodeStore` or a plain list); the same object
    is returned alongside the report.
    """
    if n_episodes < 1:
        raise ValueError("need at least one episode")
    if store is None:
        store = []
    rs = np.empty((n_episodes, g.n_areas))
    gs = np.empty((n_episodes, g.n_areas), dtype=bool)
    for k, rec in enumerate(iter_episodes(g, cfg, n_episodes, master_seed, threads)):
        store.append(rec)
        rs[k] = rec.area_resilience
        gs[k] = rec.area_gust
    report = build_report(rs, gs, lam, g.substation_names, stride)
    return report, store
