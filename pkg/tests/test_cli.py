import csv
import io
import json
import math
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from evacsim.cli import expand_batch, main, set_dotted, InputError
from evacsim.demand import SpatialAllocation, allocate_origins, load_demand
from evacsim.network import serialize_network
from evacsim.pointprocess import events_to_csv, hawkes, pp_simulate
from evacsim.policy import serialize_policy
from evacsim.synthetic import city_network, corridor_contraflow_script, corridor_network

from conftest import net_doc


def _read_csv(path):
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture()
def corridor_files(tmp_path):
    net = corridor_network()
    (tmp_path / "corridor.json").write_text(serialize_network(net))
    (tmp_path / "contraflow.json").write_text(serialize_policy(corridor_contraflow_script(net)))
    return tmp_path


def _scenario(tmp_path, name="scenario.json", **over):
    sc = {
        "network": "corridor.json",
        "seed": 1,
        "demand": {"destination": "exits", "routing_mode": "fixed_shortest",
                   "temporal": {"mean_h": 0.5, "std_h": 0.1},
                   "spatial": {"portion": 0.3}},
    }
    for k, v in over.items():
        set_dotted(sc, k, v)
    p = tmp_path / name
    p.write_text(json.dumps(sc, indent=1))
    return p


# -- validate ---------------------------------------------------------------------

def test_validate_clean_fixture(corridor_files, capsys):
    assert main(["validate", str(corridor_files / "corridor.json")]) == 0
    assert "no findings" in capsys.readouterr().out


def test_validate_dangling_connection_exit_2(tmp_path, capsys):
    text = net_doc([("A", 0, 0), ("B", 100, 0)], [{"id": "ab", "from": "A", "to": "B",
                                                  "length_m": 100}],
                   [{"from_edge": "ab", "to_edge": "X"}], tazs=[{"id": "z", "edges": ["ab"]}])
    p = tmp_path / "bad.json"
    p.write_text(text)
    assert main(["validate", str(p)]) == 2
    assert "X" in capsys.readouterr().err


def test_validate_dead_end_exit_1(tmp_path, capsys):
    text = net_doc([("A", 0, 0), ("B", 100, 0), ("C", 200, 0)],
                   [{"id": "ab", "from": "A", "to": "B", "length_m": 100},
                    {"id": "bc", "from": "B", "to": "C", "length_m": 100}],
                   tazs=[{"id": "z", "edges": ["bc"]}])
    p = tmp_path / "dead.json"
    p.write_text(text)
    assert main(["validate", "--network", str(p)]) == 1
    out = capsys.readouterr().out
    assert "dead_end" in out and "ab" in out


def test_validate_missing_file_exit_2(tmp_path):
    assert main(["validate", str(tmp_path / "nope.json")]) == 2


def test_unknown_command_exit_2():
    assert main(["frobnicate"]) == 2


# -- generate ---------------------------------------------------------------------

def test_generate_is_deterministic(corridor_files):
    sc = _scenario(corridor_files, seed=7, **{"demand.temporal.mean_h": 3.0,
                                              "demand.temporal.std_h": 0.7,
                                              "demand.spatial.portion": 1.0,
                                              "demand.spatial.density_residential": 0.0417})
    a, b = corridor_files / "a.csv", corridor_files / "b.csv"
    assert main(["generate", "--scenario", str(sc), "--out", str(a)]) == 0
    assert main(["generate", "--scenario", str(sc), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(load_demand(a)) == sum(n for _, n in allocate_origins(corridor_network(),
                                                                     SpatialAllocation()))


def test_generate_portion_half_follows_floor_rule(corridor_files):
    sc = _scenario(corridor_files, **{"demand.spatial.portion": 0.5})
    out = corridor_files / "half.csv"
    assert main(["generate", "--scenario", str(sc), "--out", str(out)]) == 0
    d = load_demand(out)
    expect = dict(allocate_origins(corridor_network(), SpatialAllocation(portion=0.5)))
    got = {}
    for t in d.trips:
        got[t.origin_edge] = got.get(t.origin_edge, 0) + 1
    assert got == expect
    full = sum(n for _, n in allocate_origins(corridor_network(), SpatialAllocation()))
    assert abs(len(d) - full / 2) <= len(expect)


def test_generate_std_ratio(tmp_path):
    (tmp_path / "city.json").write_text(serialize_network(city_network()))
    stds = {}
    for std in (0.2, 1.5):
        sc = _scenario(tmp_path, name=f"s{std}.json", network="city.json",
                       **{"demand.temporal.mean_h": 3.0, "demand.temporal.std_h": std,
                          "demand.spatial.portion": 1.0})
        out = tmp_path / f"d{std}.csv"
        assert main(["generate", "--scenario", str(sc), "--out", str(out)]) == 0
        stds[std] = load_demand(out)
    assert len(stds[0.2]) == len(stds[1.5])
    ratio = np.std([t.depart_s for t in stds[1.5].trips]) / np.std([t.depart_s for t in stds[0.2].trips])
    assert abs(ratio / 7.5 - 1) < 0.10


def test_generate_to_stdout_and_seed_flag(corridor_files, capsys):
    sc = _scenario(corridor_files)
    assert main(["generate", "--scenario", str(sc), "--seed", "3"]) == 0
    a = capsys.readouterr().out
    assert main(["generate", "--scenario", str(sc), "--seed", "4"]) == 0
    b = capsys.readouterr().out
    assert a.startswith("vehicle_id,depart_s") and a != b


def test_generate_requires_seed(corridor_files):
    sc = json.loads(_scenario(corridor_files).read_text())
    del sc["seed"]
    p = corridor_files / "noseed.json"
    p.write_text(json.dumps(sc))
    assert main(["generate", "--scenario", str(p)]) == 2


def test_generate_bad_routing_mode(corridor_files):
    sc = _scenario(corridor_files, **{"demand.routing_mode": "teleport"})
    assert main(["generate", "--scenario", str(sc)]) == 2


# -- apply-policy -----------------------------------------------------------------

def test_apply_policy_writes_network(corridor_files, capsys):
    out = corridor_files / "cf.json"
    assert main(["apply-policy", "--network", str(corridor_files / "corridor.json"),
                 "--policy", str(corridor_files / "contraflow.json"), "--out", str(out)]) == 0
    assert main(["validate", str(out)]) == 0


def test_apply_policy_failure_exit_1(corridor_files):
    (corridor_files / "bad_policy.json").write_text(json.dumps(
        {"edits": [{"op": "remove_signal", "node": "T0"}]}))
    assert main(["apply-policy", "--network", str(corridor_files / "corridor.json"),
                 "--policy", str(corridor_files / "bad_policy.json"),
                 "--out", str(corridor_files / "x.json")]) == 1


# -- run ---------------------------------------------------------------------------

def test_run_writes_consistent_outputs(corridor_files):
    sc = _scenario(corridor_files)
    out = corridor_files / "run1"
    assert main(["run", "--scenario", str(sc), "--out", str(out)]) == 0
    for name in ("summary.csv", "trips.csv", "trajectories.csv", "demand.csv", "network.json",
                 "effective_config.json", "speed_map.csv", "stats.json", "teleports.csv"):
        assert (out / name).exists(), name
    n = len(load_demand(out / "demand.csv"))
    rows = _read_csv(out / "summary.csv")
    for r in rows:
        inserted, running, finished, stranded = (int(r[k]) for k in
                                                 ("inserted", "running", "finished", "stranded"))
        assert inserted == running + finished + stranded
        assert int(r["loaded"]) >= inserted
    assert int(rows[-1]["finished"]) == n
    assert len(_read_csv(out / "trips.csv")) == n
    eff = json.loads((out / "effective_config.json").read_text())
    assert eff["sim_config"]["step_s"] == 1.0 and eff["sim_config"]["teleport_threshold_s"] == 300.0
    assert eff["sim_config"]["reroute_period_s"] == 60.0 and eff["sim_config"]["seed"] == 1


def test_run_echoes_policy(corridor_files):
    sc = _scenario(corridor_files, policy="contraflow.json")
    out = corridor_files / "run_cf"
    assert main(["run", "--scenario", str(sc), "--out", str(out)]) == 0
    rep = json.loads((out / "policy_report.json").read_text())
    # the reversed inbound trunk loses its inbound movements
    assert "in_2_0>in_1_0" in rep["dropped_connections"] and rep["closures"] == []
    net = json.loads((out / "network.json").read_text())
    ends = {e["id"]: (e["from"], e["to"]) for e in net["edges"]}
    assert ends["in_0"] == ("T0", "T1")


def test_run_closure_reports_stranded_or_teleports(corridor_files):
    base = _scenario(corridor_files, name="base.json", **{"config.max_time_s": 20000})
    closed = _scenario(corridor_files, name="closed.json", **{"config.max_time_s": 20000},
                       closures=[{"edge_id": "exit", "start_s": 1800, "end_s": 86400}])
    main(["run", "--scenario", str(base), "--out", str(corridor_files / "b")])
    main(["run", "--scenario", str(closed), "--out", str(corridor_files / "c")])
    sb = json.loads((corridor_files / "b" / "stats.json").read_text())
    sc = json.loads((corridor_files / "c" / "stats.json").read_text())
    assert sb["stranded"] == 0 and sb["teleports"] == 0
    assert sc["stranded"] + sc["teleports"] >= 1


def test_policy_close_edge_reaches_the_run(corridor_files):
    (corridor_files / "close.json").write_text(json.dumps(
        {"edits": [{"op": "close_edge", "edge": "exit", "start_s": 1800, "end_s": 86400}]}))
    sc = _scenario(corridor_files, policy="close.json", **{"config.max_time_s": 20000})
    main(["run", "--scenario", str(sc), "--out", str(corridor_files / "pc")])
    st = json.loads((corridor_files / "pc" / "stats.json").read_text())
    assert st["stranded"] + st["teleports"] >= 1


def test_run_unknown_closure_edge_exit_2(corridor_files):
    sc = _scenario(corridor_files, closures=[{"edge_id": "nowhere", "start_s": 0, "end_s": 10}])
    assert main(["run", "--scenario", str(sc), "--out", str(corridor_files / "x")]) == 2


def test_run_unknown_config_key_exit_2(corridor_files):
    sc = _scenario(corridor_files, **{"config.warp_speed": 9})
    assert main(["run", "--scenario", str(sc), "--out", str(corridor_files / "x")]) == 2


def test_run_max_time_exit_1(corridor_files):
    sc = _scenario(corridor_files, **{"config.max_time_s": 100})
    assert main(["run", "--scenario", str(sc), "--out", str(corridor_files / "x")]) == 1


def test_run_is_byte_identical(corridor_files):
    sc = _scenario(corridor_files, **{"demand.routing_mode": "dynamic"})
    for d in ("r1", "r2"):
        assert main(["run", "--scenario", str(sc), "--out", str(corridor_files / d)]) == 0
    for f in sorted((corridor_files / "r1").iterdir()):
        assert f.read_bytes() == (corridor_files / "r2" / f.name).read_bytes(), f.name


# -- analyze -----------------------------------------------------------------------

def test_analyze_single_run(corridor_files, capsys):
    sc = _scenario(corridor_files)
    run_dir = corridor_files / "one"
    main(["run", "--scenario", str(sc), "--out", str(run_dir)])
    capsys.readouterr()
    out = corridor_files / "an"
    assert main(["analyze", str(run_dir), "--out", str(out)]) == 0
    stats = json.loads((run_dir / "stats.json").read_text())
    assert f"gap area {stats['gap_area_h']:.4f} h" in capsys.readouterr().out
    rows = list(csv.reader(io.StringIO((out / "curves_one.csv").read_text())))
    assert rows[0] == ["t_s", "demand_frac", "finished_frac"] and rows[-1][1:] == ["1.000000",
                                                                                   "1.000000"]


def test_analyze_sorts_by_gap_area(corridor_files):
    dirs = []
    for name, por in (("p10", 1.0), ("p03", 0.3), ("p06", 0.6)):
        sc = _scenario(corridor_files, name=f"{name}.json", **{"demand.spatial.portion": por,
                                                              "demand.temporal.std_h": 0.05})
        d = corridor_files / name
        main(["run", "--scenario", str(sc), "--out", str(d)])
        dirs.append(str(d))
    out = corridor_files / "an3"
    assert main(["analyze", *dirs, "--out", str(out)]) == 0
    rows = _read_csv(out / "comparison.csv")
    gaps = [float(r["gap_area_h"]) for r in rows]
    assert len(rows) == 3 and gaps == sorted(gaps)
    assert [r["scenario"] for r in rows] == ["p03", "p06", "p10"]


def test_analyze_svg_cells_match_csv(corridor_files):
    sc = _scenario(corridor_files)
    d = corridor_files / "svgrun"
    main(["run", "--scenario", str(sc), "--out", str(d)])
    out = corridor_files / "an_svg"
    assert main(["analyze", str(d), "--out", str(out), "--svg", "--bin", "0"]) == 0
    svg = out / "speed_map_svgrun.svg"
    assert svg.exists() and (out / "curves.svg").exists()
    table = {r["edge"]: float(r["mean_speed_mps"]) for r in _read_csv(out / "speed_map_svgrun.csv")
             if float(r["bin_start_s"]) == 0.0}
    lines = [el for el in ET.parse(svg).getroot().iter()
             if el.tag.endswith("line") and el.get("data-edge")]
    seen = 0
    for el in lines:
        e = el.get("data-edge")
        if e in table:
            assert float(el.get("data-mean")) == pytest.approx(table[e], abs=1e-4)
            seen += 1
        else:
            assert el.get("data-mean") == ""
    assert seen == len(table) > 0


def test_analyze_rejects_non_run_dir(tmp_path):
    assert main(["analyze", str(tmp_path)]) == 2


# -- batch -------------------------------------------------------------------------

def _batch(tmp_path, axes, name="batch.json"):
    p = tmp_path / name
    p.write_text(json.dumps({"base": "base.json", "axes": axes}))
    return p


def test_batch_two_by_two(corridor_files):
    _scenario(corridor_files, name="base.json")
    spec = _batch(corridor_files, {"demand.temporal.std_h": [0.1, 0.2],
                                   "demand.spatial.portion": [0.2, 0.3]})
    out = corridor_files / "bo"
    assert main(["batch", "--scenario", str(spec), "--out", str(out)]) == 0
    rows = _read_csv(out / "batch_summary.csv")
    assert len(rows) == 4
    assert [(r["demand.spatial.portion"], r["demand.temporal.std_h"]) for r in rows] == [("0.2", "0.1"), ("0.2", "0.2"),
                                                          ("0.3", "0.1"), ("0.3", "0.2")]
    assert all((out / r["scenario"] / "trips.csv").exists() for r in rows)


def test_batch_single_value_is_byte_identical_to_run(corridor_files):
    base = _scenario(corridor_files, name="base.json")
    spec = _batch(corridor_files, {"demand.spatial.portion": [0.3]})
    out = corridor_files / "bo1"
    assert main(["batch", "--scenario", str(spec), "--out", str(out)]) == 0
    run_dir = corridor_files / "solo"
    assert main(["run", "--scenario", str(base), "--out", str(run_dir)]) == 0
    (sub,) = [d for d in out.iterdir() if d.is_dir()]
    names = sorted(f.name for f in run_dir.iterdir())
    assert names == sorted(f.name for f in sub.iterdir())
    for n in names:
        assert (run_dir / n).read_bytes() == (sub / n).read_bytes(), n


def test_batch_workers_match_serial(corridor_files):
    _scenario(corridor_files, name="base.json")
    spec = _batch(corridor_files, {"seed": [1, 2]})
    main(["batch", "--scenario", str(spec), "--out", str(corridor_files / "ser")])
    main(["batch", "--scenario", str(spec), "--out", str(corridor_files / "par"), "--workers", "2"])
    assert (corridor_files / "ser" / "batch_summary.csv").read_bytes() == \
        (corridor_files / "par" / "batch_summary.csv").read_bytes()


def test_batch_std_sweep_direction(corridor_files):
    _scenario(corridor_files, name="base.json", **{"demand.spatial.portion": 1.0,
                                                   "config.record_trajectories": False})
    spec = _batch(corridor_files, {"demand.temporal.std_h": [0.05, 0.1, 0.2, 0.4]})
    out = corridor_files / "std"
    assert main(["batch", "--scenario", str(spec), "--out", str(out)]) == 0
    gaps = [float(r["gap_area_h"]) for r in _read_csv(out / "batch_summary.csv")]
    # concentrating departures never helps once the corridor saturates
    assert all(a >= b for a, b in zip(gaps, gaps[1:]))


def test_batch_portion_sweep_direction(corridor_files):
    _scenario(corridor_files, name="base.json", **{"demand.temporal.std_h": 0.05,
                                                   "config.record_trajectories": False})
    spec = _batch(corridor_files, {"demand.spatial.portion": [1.0, 0.75, 0.5]})
    out = corridor_files / "por"
    assert main(["batch", "--scenario", str(spec), "--out", str(out)]) == 0
    gaps = [float(r["gap_area_h"]) for r in _read_csv(out / "batch_summary.csv")]
    assert all(a >= b for a, b in zip(gaps, gaps[1:]))


def test_expand_batch_sorted_cross_product():
    jobs = expand_batch({"seed": 1, "demand": {}}, {"z": [1, 2], "a.b": ["x", "y"]})
    assert [v for _, _, v in jobs] == [{"a.b": "x", "z": 1}, {"a.b": "x", "z": 2},
                                       {"a.b": "y", "z": 1}, {"a.b": "y", "z": 2}]
    assert jobs[3][1]["a"]["b"] == "y" and jobs[3][1]["z"] == 2
    with pytest.raises(InputError):
        expand_batch({}, {"a": []})


def test_set_dotted_list_index():
    d = {"closures": [{"start_s": 0}]}
    set_dotted(d, "closures.0.start_s", 1200)
    assert d["closures"][0]["start_s"] == 1200
    with pytest.raises(InputError):
        set_dotted(d, "closures.5.start_s", 1)


# -- point processes ---------------------------------------------------------------

def test_fit_and_simulate_pp(tmp_path, capsys):
    truth = hawkes(0.5, 0.4, 1.2, (0.0, 400.0))
    ev = pp_simulate(truth, 3)
    (tmp_path / "ev.csv").write_text(events_to_csv(ev))
    model_path = tmp_path / "model.json"
    assert main(["fit-pp", str(tmp_path / "ev.csv"), "--family", "hawkes", "--window", "0",
                 "400", "--out", str(model_path)]) == 0
    doc = json.loads(model_path.read_text())
    assert doc["converged"] and doc["n_events"] == len(ev) and doc["model"]["kind"] == "hawkes"
    assert math.isfinite(doc["loglik"])
    capsys.readouterr()
    a, b = tmp_path / "s1.csv", tmp_path / "s2.csv"
    assert main(["simulate-pp", "--model", str(model_path), "--seed", "5", "--out", str(a)]) == 0
    assert main(["simulate-pp", "--model", str(model_path), "--seed", "5", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes() and a.read_text().count("\n") > 10


def test_fit_pp_homogeneous_rate(tmp_path, capsys):
    (tmp_path / "ev.csv").write_text("t_s,block\n" + "".join(f"{t},0\n" for t in range(1, 51)))
    assert main(["fit-pp", str(tmp_path / "ev.csv"), "--family", "homogeneous", "--window", "0",
                 "100"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["model"]["baseline"][0][0] == pytest.approx(0.5, abs=1e-6)


def test_simulate_pp_bad_model(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"kind": "hawkes"}))
    assert main(["simulate-pp", "--model", str(tmp_path / "m.json")]) == 2
