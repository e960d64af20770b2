"""``resilisim`` command line.

    resilisim testbed|synth|estimate|enhance|report --config run.toml
              [--seed S] [--episodes N] [--threads T] [--areas a,b,c]

Exit status: 0 on success, 1 for configuration problems (bad values,
missing files), 2 for failures while running.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from . import io
from .config import ConfigError, RunConfig, load_config
from .enhance import DERPlan, FitnessEvaluator, evolve
from .network import IngestError, NetworkGraph, synthesize
from .simulation import GA, estimate, stream
from .store import EpisodeStore
from .testbed import generate_testbed

log = logging.getLogger("resilisim")

NETWORK = "network.bin"
EPISODES = "episodes.bin"


def _fmt(x: float) -> str:
    return f"{x:.10f}"


# -- commands -----------------------------------------------------------------

def cmd_testbed(cfg: RunConfig) -> dict:
    roads, buildings, subs, raster = generate_testbed(cfg.testbed, cfg.master_seed)
    p = cfg.inputs
    for key in p:
        Path(p[key]).parent.mkdir(parents=True, exist_ok=True)
    io.write_substations(p["substations"], subs)
    io.write_roads(p["roads"], roads)
    io.write_buildings(p["buildings"], buildings)
    io.write_tree_raster(p["tree_cover"], raster)
    n_res = sum(b.residential for b in buildings)
    print(f"testbed: {len(roads)} roads, {len(buildings)} buildings ({n_res} residential), "
          f"{len(subs)} substations, canopy raster {raster.values.shape[0]}x{raster.values.shape[1]}")
    for key, path in p.items():
        print(f"  {key}: {path}")
    return {"roads": len(roads), "buildings": len(buildings), "residential": n_res, "substations": len(subs)}


def cmd_synth(cfg: RunConfig) -> NetworkGraph:
    cfg.require_inputs()
    p = cfg.inputs
    subs = io.read_substations(p["substations"])
    roads = io.read_roads(p["roads"])
    buildings = io.read_buildings(p["buildings"])
    raster = io.read_tree_raster(p["tree_cover"])
    g = synthesize(roads, buildings, subs, raster, cfg.network)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    io.save_graph(g, cfg.out(NETWORK))
    io.write_geojson(cfg.out("network.geojson"), io.graph_geojson(g))
    s = g.stats
    print(f"network: {s['nodes']} nodes ({s['substations']} substations, {s['poles']} poles, "
          f"{s['loads']} loads), {s['edges']} edges, {s['areas']} areas, {s['customers']} customers")
    if s.get("unreachable_loads"):
        print(f"  warning: {s['unreachable_loads']} loads cannot reach any substation")
    return g


def _load_network(cfg: RunConfig) -> NetworkGraph:
    cfg.require(cfg.out(NETWORK), hint="run the synth command first")
    return io.load_graph(cfg.out(NETWORK))


def cmd_estimate(cfg: RunConfig):
    g = _load_network(cfg)
    t0 = time.perf_counter()
    with EpisodeStore.create(cfg.out(EPISODES), g.area_customers(), cfg.simulation.horizon_h) as store:
        report, _ = estimate(g, cfg.simulation, cfg.episodes, cfg.master_seed, store=store,
                             threads=cfg.workers, lam=cfg.lam, stride=cfg.report_stride)
    elapsed = time.perf_counter() - t0
    write_resilience_csv(cfg.out("resilience.csv"), report)
    write_convergence_csv(cfg.out("convergence.csv"), report)
    io.write_geojson(cfg.out("resilience.geojson"), resilience_geojson(g, report))
    print(f"estimated {report.n_episodes} episodes in {elapsed:.1f} s, lambda = {report.lam}")
    print(f"{'area':<12}{'R_i':>12}{'N_gust':>9}")
    for name, r, ng in zip(report.area_names, report.R, report.n_gust):
        print(f"{name:<12}{r:>12.6f}{int(ng):>9}")
    return report


def _area_indices(g: NetworkGraph, names):
    if not names:
        return None
    out = []
    for n in names:
        if n not in g.substation_names:
            raise ConfigError(f"unknown area {n!r}; known areas: {', '.join(g.substation_names)}")
        out.append(g.substation_names.index(n))
    return out


def cmd_enhance(cfg: RunConfig):
    g = _load_network(cfg)
    cfg.require(cfg.out(EPISODES), hint="run the estimate command first")
    areas = _area_indices(g, cfg.areas)
    with EpisodeStore.open(cfg.out(EPISODES)) as store:
        records = list(store)
    if not records:
        raise RuntimeError("episode store is empty")
    ev = FitnessEvaluator(g, records, cfg.ga, cfg.lam, areas)
    result = evolve(g, records, cfg.ga, stream(cfg.master_seed, GA), cfg.lam, areas,
                    threads=cfg.workers, evaluator=ev)
    problems = result.best.violations(g, cfg.ga)
    if problems:
        raise RuntimeError("best plan violates constraints: " + "; ".join(problems))
    _write_json(cfg.out("plan.json"), result.best.to_json())
    _write_json(cfg.out("enhance_summary.json"), {
        "areas": [g.substation_names[a] for a in (areas if areas is not None else range(g.n_areas))],
        "baseline_fitness": result.baseline, "fitness": result.best_fitness,
        "cost": result.best.cost(cfg.ga), "generations": cfg.ga.generations,
        "population": cfg.ga.population, "episodes_replayed": len(ev.replays)})
    with open(cfg.out("ga_history.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["generation", "best_fitness", "mean_fitness"])
        for gen, best, mean in result.history:
            w.writerow([gen, _fmt(best), _fmt(mean)])
    io.write_geojson(cfg.out("plan.geojson"), plan_geojson(g, result.best))
    print(f"baseline min-area R {result.baseline:.6f}, best plan {result.best_fitness:.6f} "
          f"({len(result.best.placements)} placements, cost {result.best.cost(cfg.ga):,.0f})")
    return result


def cmd_report(cfg: RunConfig) -> str:
    res = cfg.out("resilience.csv")
    cfg.require(res, hint="run the estimate command first")
    with open(res, newline="") as fh:
        rows = list(csv.DictReader(fh))
    lines = ["Resilience by substation area", ""]
    lines.append(f"{'area':<12}{'R_i':>14}{'N_gust':>9}{'episodes':>10}")
    for r in rows:
        lines.append(f"{r['area_id']:<12}{float(r['R_i']):>14.6f}{r['N_gust']:>9}{r['episodes']:>10}")
    worst = min(rows, key=lambda r: float(r["R_i"]))
    lines += ["", f"worst area: {worst['area_id']} (R = {float(worst['R_i']):.6f})"]
    plan_path, summary_path = cfg.out("plan.json"), cfg.out("enhance_summary.json")
    if plan_path.is_file() and summary_path.is_file():
        plan = json.loads(plan_path.read_text())
        info = json.loads(summary_path.read_text())
        base, best = info["baseline_fitness"], info["fitness"]
        lines += ["", "DER enhancement",
                  f"areas: {', '.join(info['areas'])}",
                  f"generations: {info['generations']}",
                  f"min-area R without DERs: {base:.6f}",
                  f"min-area R with best plan: {best:.6f}",
                  f"improvement: {best - base:+.6f}",
                  f"placements: {len(plan)}, cost {info['cost']:,.0f}"]
        for p in plan:
            lines.append(f"  node {p['node_id']:>7}  {p['kind']:<8}{p['capacity_kw']:>10.1f} kW")
    text = "\n".join(lines) + "\n"
    cfg.out("summary.txt").write_text(text)
    print(text, end="")
    return text


# -- output helpers ---------------------------------------------------------------

def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def write_resilience_csv(path, report):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["area_id", "R_i", "N_gust", "episodes"])
        for name, r, ng in zip(report.area_names, report.R, report.n_gust):
            w.writerow([name, _fmt(r), int(ng), report.n_episodes])


def write_convergence_csv(path, report):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["area_id", "episode", "running_R"])
        for a, name in enumerate(report.area_names):
            for n, r in zip(report.checkpoints, report.running[a]):
                w.writerow([name, int(n), _fmt(r)])


def _color(r, lo, hi):
    u = 0.0 if hi <= lo else (r - lo) / (hi - lo)
    return "#{:02x}{:02x}00".format(int(round(255 * (1 - u))), int(round(200 * u)))


def resilience_geojson(g: NetworkGraph, report) -> dict:
    """One polygon per area (hull of its nodes) carrying R_i and a red-to-green colour."""
    lo, hi = float(report.R.min()), float(report.R.max())
    feats = []
    for a, name in enumerate(report.area_names):
        ids = np.flatnonzero(g.area == a)
        coords = io.lonlat(g, ids)
        geom = {"type": "MultiPoint", "coordinates": coords}
        if len(ids) >= 3:
            try:
                hull = ConvexHull(g.xy[ids])
                ring = [coords[i] for i in hull.vertices] + [coords[hull.vertices[0]]]
                geom = {"type": "Polygon", "coordinates": [ring]}
            except QhullError:
                pass
        props = {"area_id": name, "R_i": round(float(report.R[a]), 10), "N_gust": int(report.n_gust[a]),
                 "episodes": report.n_episodes, "fill": _color(float(report.R[a]), lo, hi)}
        feats.append({"type": "Feature", "geometry": geom, "properties": props})
    return {"type": "FeatureCollection", "features": feats}


def plan_geojson(g: NetworkGraph, plan: DERPlan) -> dict:
    ids = np.array(plan.nodes, dtype=np.int64)
    coords = io.lonlat(g, ids) if len(ids) else []
    feats = []
    for p, c in zip(plan.placements, coords):
        props = {"node_id": p.node, "kind": p.kind.value, "capacity_kw": p.capacity,
                 "area_id": io.area_name(g, int(g.area[p.node]))}
        feats.append({"type": "Feature", "geometry": {"type": "Point", "coordinates": c}, "properties": props})
    return {"type": "FeatureCollection", "features": feats}


# -- entry point ---------------------------------------------------------------------

COMMANDS = {
    "testbed": cmd_testbed,
    "synth": cmd_synth,
    "estimate": cmd_estimate,
    "enhance": cmd_enhance,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="resilisim", description="Storm resilience estimation and DER planning.")
    ap.add_argument("command", choices=list(COMMANDS))
    ap.add_argument("--config", required=True, help="run configuration (TOML)")
    ap.add_argument("--seed", type=int, help="override run.master_seed")
    ap.add_argument("--episodes", type=int, help="override run.episodes")
    ap.add_argument("--threads", type=int, help="worker processes (0: one per CPU)")
    ap.add_argument("--areas", help="comma-separated substation names to optimise for")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def configure(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.episodes is not None:
        cfg.episodes = args.episodes
    if args.threads is not None:
        cfg.threads = args.threads
    if args.areas:
        cfg.areas = [a.strip() for a in args.areas.split(",") if a.strip()]
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = configure(args)
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except IngestError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        for e in exc.errors[:20]:
            print(f"  {e}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every other failure maps to exit 2
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
