"""Build a network, run a few storms and look at one episode up close.

    python demos/resilience_walkthrough.py
"""
import numpy as np

from resilisim.network import summarize, synthesize
from resilisim.simulation import SimulationConfig, estimate
from resilisim.testbed import TestbedSpec, generate_testbed


def sparkline(curve, width=56):
    bars = " .:-=+*#%@"
    idx = np.linspace(0, len(curve) - 1, width).astype(int)
    return "".join(bars[min(9, int(curve[i] * 9.999))] for i in idx)


def main():
    roads, buildings, subs, raster = generate_testbed(TestbedSpec(n_buildings=250), seed=3)
    g = synthesize(roads, buildings, subs, raster)
    print("network:", summarize(g))

    report, records = estimate(g, SimulationConfig(), 400, master_seed=3)
    for name, r, ng, se in zip(report.area_names, report.R, report.n_gust, report.stderr()):
        print(f"{name:8s} R = {r:.5f} +/- {se:.5f}  ({ng} gust episodes)")

    worst = min(records, key=lambda rec: rec.area_resilience.min())
    a = int(np.argmin(worst.area_resilience))
    print(f"\nhardest episode #{worst.episode_index}: {len(worst.failures)} lines down over a "
          f"{worst.duration} h storm, {len(worst.repairs)} repaired")
    print(f"served fraction in {report.area_names[a]}, hours 0..{worst.horizon}:")
    print("  |" + sparkline(worst.area_curves[a]) + "|")


if __name__ == "__main__":
    main()
