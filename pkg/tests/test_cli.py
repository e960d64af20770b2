import csv
import hashlib
import json

import pytest

from resilisim.cli import main
from resilisim.config import ConfigError, from_dict, load_config
from resilisim.enhance import DERPlan, GAConfig
from resilisim.io import load_graph

BASE = """
[run]
master_seed = 5
episodes = 40
report_stride = 10
threads = 1
output_dir = "out"

[testbed]
grid_rows = 8
grid_cols = 8
n_buildings = 80

[ga]
population = 6
generations = 3
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "run.toml").write_text(BASE)
    return tmp_path


def run(workdir, *args):
    return main([args[0], "--config", str(workdir / "run.toml"), *args[1:]])


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_config_defaults_and_paths(workdir):
    cfg = load_config(workdir / "run.toml")
    assert cfg.lam == 0.8
    assert cfg.output_dir == workdir / "out"
    assert cfg.inputs["roads"] == workdir / "out" / "inputs" / "roads.jsonl"
    assert cfg.testbed.grid_rows == 8 and cfg.ga.population == 6
    assert cfg.simulation.crews.n_crews == 5 and cfg.simulation.horizon_h == 168


def test_config_sections_map_to_models(tmp_path):
    doc = {"fragility": {"v_min": 12.0, "tree_alpha": 0.5, "tree_curve": {"p_cap": 0.2}},
           "simulation": {"n_crews": 2, "repair_time_max": 6, "horizon_h": 100},
           "weather": {"gust_hour_fraction": 0.1}, "network": {"patch_size_m": 250.0}}
    cfg = from_dict(doc, tmp_path)
    assert cfg.simulation.fragility.wind.v_min == 12.0
    assert cfg.simulation.fragility.tree.alpha == 0.5
    assert cfg.simulation.fragility.tree.curve.p_cap == 0.2
    assert cfg.simulation.crews.n_crews == 2 and cfg.simulation.horizon_h == 100
    assert cfg.simulation.weather.gust_hour_fraction == 0.1
    assert cfg.network.patch_size_m == 250.0


@pytest.mark.parametrize("doc,msg", [
    ({"run": {"lambda": 1.5}}, "lambda"),
    ({"run": {"episodes": 0}}, "episodes"),
    ({"run": {"bogus": 1}}, "bogus"),
    ({"ga": {"popsize": 3}}, "popsize"),
    ({"extra": {}}, "extra"),
    ({"inputs": {"wind_samples": "nope.csv"}}, "nope.csv"),
    ({"simulation": {"n_crews": 0}}, "crew"),
])
def test_config_rejections(tmp_path, doc, msg):
    with pytest.raises(ConfigError, match=msg):
        from_dict(doc, tmp_path)


def test_missing_inputs_reported(workdir, capsys):
    assert run(workdir, "synth") == 1
    assert "testbed" in capsys.readouterr().err


def test_bad_values_exit_1(workdir, capsys):
    assert run(workdir, "estimate", "--episodes", "-3") == 1
    assert main(["report", "--config", str(workdir / "absent.toml")]) == 1


def test_runtime_failure_exit_2(workdir):
    assert run(workdir, "testbed") == 0
    (workdir / "out" / "inputs" / "roads.jsonl").write_text("[[1, 2]]\n")
    assert run(workdir, "synth") == 2


def test_full_pipeline(workdir, capsys):
    out = workdir / "out"
    assert run(workdir, "testbed") == 0
    first = {p.name: digest(p) for p in (out / "inputs").iterdir()}
    assert run(workdir, "testbed") == 0
    assert first == {p.name: digest(p) for p in (out / "inputs").iterdir()}

    assert run(workdir, "synth") == 0
    printed = capsys.readouterr().out
    g = load_graph(out / "network.bin")
    assert f"{g.n_nodes} nodes" in printed and "3 areas" in printed
    h = digest(out / "network.bin")
    assert run(workdir, "synth") == 0
    assert digest(out / "network.bin") == h

    assert run(workdir, "estimate") == 0
    assert "lambda = 0.8" in capsys.readouterr().out
    with open(out / "resilience.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["area_id"] for r in rows] == ["SUB1", "SUB2", "SUB3"]
    assert all(r["episodes"] == "40" for r in rows)
    with open(out / "convergence.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 3 * 40 // 10
    geo = json.loads((out / "resilience.geojson").read_text())
    assert len(geo["features"]) == 3

    assert run(workdir, "report") == 0
    text = (out / "summary.txt").read_text()
    assert "DER enhancement" not in text and "worst area" in text

    assert run(workdir, "enhance", "--areas", "SUB1,SUB3") == 0
    plan = DERPlan.from_json(json.loads((out / "plan.json").read_text()))
    assert not plan.violations(g, GAConfig(population=6, generations=3))
    with open(out / "ga_history.csv") as fh:
        best = [float(r["best_fitness"]) for r in csv.DictReader(fh)]
    assert len(best) == 4 and best == sorted(best)
    summary = json.loads((out / "enhance_summary.json").read_text())
    assert summary["areas"] == ["SUB1", "SUB3"]
    assert len(json.loads((out / "plan.geojson").read_text())["features"]) == len(plan.placements)

    assert run(workdir, "report") == 0
    text = (out / "summary.txt").read_text()
    assert "min-area R without DERs" in text and "improvement" in text
    assert run(workdir, "report") == 0
    assert (out / "summary.txt").read_text() == text


def test_unknown_area_is_config_error(workdir):
    for cmd in ("testbed", "synth", "estimate"):
        assert run(workdir, cmd) == 0
    assert run(workdir, "enhance", "--areas", "SUB14") == 1


def test_enhance_needs_store(workdir):
    assert run(workdir, "testbed") == 0
    assert run(workdir, "synth") == 0
    assert run(workdir, "enhance") == 1
