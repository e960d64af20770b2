"""Site solar and batteries to lift the weakest area, then inspect the plan.

    python demos/der_siting.py
"""
import numpy as np

from resilisim.enhance import DERPlan, FitnessEvaluator, GAConfig, evolve
from resilisim.network import synthesize
from resilisim.simulation import SimulationConfig, estimate
from resilisim.testbed import TestbedSpec, generate_testbed


def main():
    g = synthesize(*generate_testbed(TestbedSpec(n_buildings=250), seed=5))
    _, records = estimate(g, SimulationConfig(), 300, master_seed=5)

    cfg = GAConfig(population=16, generations=10, max_locations=8)
    ev = FitnessEvaluator(g, records, cfg)
    res = evolve(g, records, cfg, np.random.default_rng(5), evaluator=ev)

    for gen, best, mean in res.history:
        print(f"gen {gen:3d}  best {best:.6f}  mean {mean:.6f}")
    print(f"\nno DERs: {res.baseline:.6f}   best plan: {res.best_fitness:.6f}")
    print("per-area before:", np.round(ev.area_scores(DERPlan()), 6))
    print("per-area after: ", np.round(ev.area_scores(res.best), 6))
    for p in res.best.placements:
        print(f"  node {p.node:5d}  {p.kind.value:8s} {p.capacity:7.1f} kW  area "
              f"{g.substation_names[g.area[p.node]]}")


if __name__ == "__main__":
    main()
