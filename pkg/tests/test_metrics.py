import csv
import io
import math
import random
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, strategies as st

from evacsim.demand import GammaTemporal, SpatialAllocation, generate_demand
from evacsim.engine import SimConfig, TripRecord, run
from evacsim.metrics import (EvacCurve, InverseCurve, MetricsError, build_curves,
                             build_speed_map, comparison_csv, curves_csv, curves_svg, gap_area,
                             speed_color, speed_map_from_cells, speed_map_svg,
                             summarize_scenarios, time_to_fraction)
from evacsim.policy import apply_policy
from evacsim.synthetic import (corridor_contraflow_script, corridor_network, diamond_network,
                               minimal_network)

from oracles import oracle_gap as _oracle_gap, random_piecewise as _random_piecewise


def _trips(departs, arrives):
    return [TripRecord(f"v{i}", d, a, "finished" if a is not None else "stranded")
            for i, (d, a) in enumerate(zip(departs, arrives))]


def _curve(departs, arrives):
    return build_curves(list(departs), _trips(departs, arrives))


# -- curves ----------------------------------------------------------------------

def test_two_trip_curve():
    c = _curve([0.0, 100.0], [50.0, 150.0])
    assert c.demand_frac(99.0) == 0.5 and c.demand_frac(100.0) == 1.0
    assert c.finished_frac(149.0) == 0.5 and c.finished_frac(150.0) == 1.0
    assert c.demand(1.0) == 100.0 and c.finished(1.0) == 150.0
    assert not c.flagged


def test_all_stranded_is_flat_and_flagged():
    c = _curve([0.0, 10.0, 20.0], [None, None, None])
    assert c.stranded == 3 and c.flagged
    assert all(c.finished_frac(t) == 0.0 for t in (0.0, 1e3, 1e6))
    with pytest.raises(MetricsError, match="stranded"):
        gap_area(c)


def test_partially_stranded_is_flagged():
    c = _curve([0.0, 10.0], [30.0, None])
    assert c.flagged and c.stranded == 1
    assert c.finished.terminal == pytest.approx(0.5)
    assert time_to_fraction(c, 0.9) == math.inf


def test_thousand_trips_match_counting_oracle():
    rng = np.random.default_rng(5)
    dep = rng.uniform(0, 7200, 1000).round(0)
    arr = dep + rng.uniform(30, 3000, 1000).round(0)
    c = _curve(dep, arr)
    sd, sa = np.sort(dep), np.sort(arr)
    n = 1000
    for i in range(1, 1001):
        q = i / 1000
        k = math.ceil(q * n - 1e-9) - 1
        assert c.demand(q) == sd[k]
        assert c.finished(q) == sa[k]
    for t in np.linspace(0, 11000, 301):
        assert c.demand_frac(t) == np.count_nonzero(dep <= t) / n
        assert c.finished_frac(t) == np.count_nonzero(arr <= t) / n


def test_inverse_curve_rejects_bad_knots():
    with pytest.raises(MetricsError):
        InverseCurve([0.0, 0.5, 0.4], [0.0, 1.0, 2.0])
    with pytest.raises(MetricsError):
        InverseCurve([0.0, 1.0], [5.0, 1.0])
    with pytest.raises(MetricsError):
        InverseCurve([], [])


# -- gap area ---------------------------------------------------------------------

def test_identical_curves_have_zero_gap():
    c = _curve([0.0, 60.0, 300.0], [0.0, 60.0, 300.0])
    assert gap_area(c) == 0.0
    assert gap_area(c, rule="left") == 0.0


@pytest.mark.parametrize("rule", ["exact", "left"])
def test_shift_gives_shift(rule):
    rng = np.random.default_rng(3)
    dep = np.sort(rng.uniform(0, 5000, 400))
    c = _curve(dep, dep + 0.36 * 3600)
    assert gap_area(c, rule=rule) == pytest.approx(0.36, abs=1e-9)


def test_piecewise_linear_fixture_matches_trapezoid_oracle():
    dem = [(0.0, 0.0), (1.0, 1.0)]
    fin = [(0.0, 0.5), (1.0, 2.0)]
    c = EvacCurve.from_piecewise(dem, fin)
    expected = _oracle_gap([(0, 0), (1, 3600)], [(0, 1800), (1, 7200)]) / 3600
    assert expected == pytest.approx(0.75, abs=1e-9)
    assert abs(gap_area(c, grid=0.001) - expected) < 1e-6


def test_left_rule_is_the_grid_riemann_sum():
    c = EvacCurve.from_piecewise([(0.0, 0.0), (1.0, 1.0)], [(0.0, 0.5), (1.0, 2.0)])
    p = np.arange(1000) / 1000
    riemann = float(np.sum(0.001 * ((0.5 + 1.5 * p) - p)))
    assert gap_area(c, grid=0.001, rule="left") == pytest.approx(riemann, abs=1e-9)


def test_random_piecewise_pairs_match_trapezoid_oracle():
    rng = np.random.default_rng(20)
    for _ in range(20):
        dem = _random_piecewise(rng, int(rng.integers(2, 9)))
        fin = _random_piecewise(rng, int(rng.integers(2, 9)), t0=0.3)
        c = EvacCurve.from_piecewise(dem, fin)
        oracle = _oracle_gap([(p, t * 3600) for p, t in dem], [(p, t * 3600) for p, t in fin]) / 3600
        assert abs(gap_area(c) - oracle) < 1e-6


def test_gap_area_equals_mean_trip_time():
    rng = np.random.default_rng(8)
    dep = rng.uniform(0, 3600, 300)
    arr = dep + rng.uniform(100, 900, 300)
    c = _curve(dep, arr)
    assert gap_area(c) == pytest.approx(np.mean(arr - dep) / 3600, rel=1e-12)


def test_unknown_rule_rejected():
    with pytest.raises(MetricsError):
        gap_area(_curve([0.0], [1.0]), rule="midpoint")


trip_lists = st.lists(st.tuples(st.integers(0, 5000), st.integers(0, 2000)), min_size=1,
                      max_size=60)


@given(trip_lists)
def test_gap_nonnegative_and_zero_iff_coincident(pairs):
    dep = [float(d) for d, _ in pairs]
    arr = [float(d + w) for d, w in pairs]
    g = gap_area(_curve(dep, arr))
    assert g >= -1e-12
    assert (abs(g) < 1e-12) == all(w == 0 for _, w in pairs)


@given(trip_lists, st.randoms(use_true_random=False))
def test_gap_invariant_under_relabeling(pairs, rnd):
    dep = [float(d) for d, _ in pairs]
    arr = [float(d + w) for d, w in pairs]
    order = list(range(len(pairs)))
    rnd.shuffle(order)
    # shuffle departures and arrivals independently: only sorted times matter
    order2 = list(order)
    rnd.shuffle(order2)
    a = gap_area(_curve(dep, arr))
    b = gap_area(build_curves([dep[i] for i in order], _trips([dep[i] for i in order],
                                                              [arr[i] for i in order2])))
    assert a == pytest.approx(b, abs=1e-12)


@given(st.integers(2, 8), st.floats(0.5, 1.0), st.floats(1.0, 2.0), st.integers(0, 10**6))
def test_grid_refinement_is_stable(k, shift, scale, seed):
    rng = np.random.default_rng(seed)
    dem = _random_piecewise(rng, k, span=1.0)
    fin = [(p, t * scale + shift) for p, t in dem]
    c = EvacCurve.from_piecewise(dem, fin)
    coarse = gap_area(c, grid=0.01, rule="left")
    fine = gap_area(c, grid=0.001, rule="left")
    assert abs(coarse - fine) < 0.01 * fine


# -- speed maps -------------------------------------------------------------------

def test_speed_map_single_vehicle():
    net = minimal_network()
    sm = build_speed_map([(0.0, "v", "e0", 0, 1.0, 10.0), (1.0, "v", "e0", 0, 11.0, 20.0)], net)
    assert sm.mean("e0", 0) == 15.0 and sm.count("e0", 0) == 2


def test_speed_map_empty_log():
    sm = build_speed_map([], minimal_network())
    assert sm.cells == {} and sm.mean("e0", 0) is None and sm.count("e0", 0) == 0
    assert sm.to_csv() == "edge,bin_start_s,mean_speed_mps,samples\n"


def test_speed_map_unknown_edge():
    with pytest.raises(MetricsError, match="nope"):
        build_speed_map([(0.0, "v", "nope", 0, 1.0, 3.0)], minimal_network())


def test_speed_map_matches_group_by_oracle():
    net = diamond_network()
    rng = random.Random(4)
    edges = sorted(net.edges)
    rows = sorted((float(rng.randrange(0, 7200)), f"v{rng.randrange(9)}", rng.choice(edges), 0,
                   rng.uniform(0, 50), rng.uniform(0, 14)) for _ in range(500))
    sm = build_speed_map(rows, net, bin_s=600.0)
    groups = {}
    for t, _, e, _, _, s in rows:
        groups.setdefault((e, int(t // 600)), []).append(s)
    assert set(sm.cells) == set(groups)
    for key, vals in groups.items():
        assert sm.cells[key][0] == pytest.approx(sum(vals) / len(vals))
        assert sm.cells[key][1] == len(vals)


@given(st.lists(st.tuples(st.integers(0, 5000), st.floats(0, 30)), min_size=1, max_size=50))
def test_speed_map_mean_within_sample_range(samples):
    net = minimal_network()
    rows = sorted((float(t), "v", "e0", 0, 0.0, s) for t, s in samples)
    sm = build_speed_map(rows, net, bin_s=1800.0)
    for (e, b), (m, n) in sm.cells.items():
        vals = [s for t, s in samples if int(t // 1800) == b]
        assert min(vals) - 1e-9 <= m <= max(vals) + 1e-9 and n == len(vals)


@pytest.fixture(scope="module")
def corridor_run():
    net = corridor_network()
    d = generate_demand(net, SpatialAllocation(portion=0.3), GammaTemporal(0.5, 0.1), "exits",
                        "fixed_shortest", 1)
    return net, d, run(net, d, (), SimConfig())


def test_engine_cells_agree_with_trajectory_speed_map(corridor_run):
    net, _, out = corridor_run
    a = build_speed_map(out.trajectory_rows(), net, 1800.0)
    b = speed_map_from_cells(out.speed_cells, net, 1800.0)
    assert set(a.cells) == set(b.cells)
    for k in a.cells:
        assert a.cells[k][1] == b.cells[k][1]
        assert a.cells[k][0] == pytest.approx(b.cells[k][0])
        assert 0.0 <= a.cells[k][0] <= net.edges[k[0]].speed_limit * 1.05


def test_speed_map_svg_colors_match_csv(corridor_run):
    net, _, out = corridor_run
    sm = build_speed_map(out.trajectory_rows(), net, 1800.0)
    b = sm.bins()[0]
    table = {r["edge"]: float(r["mean_speed_mps"]) for r in csv.DictReader(io.StringIO(sm.to_csv()))
             if float(r["bin_start_s"]) == b * 1800.0}
    root = ET.fromstring(speed_map_svg(sm, net, b))
    lines = [el for el in root.iter() if el.tag.endswith("line") and el.get("data-edge")]
    assert {el.get("data-edge") for el in lines} == set(net.edges)
    for el in lines:
        e = el.get("data-edge")
        if e in table:
            m = float(el.get("data-mean"))
            assert m == pytest.approx(table[e], abs=1e-4)
            assert el.get("stroke") == speed_color(sm.mean(e, b) / net.edges[e].speed_limit)
        else:
            assert el.get("data-mean") == "" and el.get("stroke") == speed_color(None)


def test_speed_color_endpoints():
    assert speed_color(None) == "#bbbbbb"
    assert speed_color(0.0) == "#ff0030"
    assert speed_color(1.0) == "#00c830"
    assert speed_color(3.0) == speed_color(1.0)


# -- tables and files -------------------------------------------------------------

def test_single_scenario_row_is_consistent():
    c = _curve([0.0, 100.0, 200.0, 300.0], [400.0, 500.0, 700.0, 900.0])
    (row,) = summarize_scenarios([("s", c)])
    assert row.scenario == "s" and row.gap_area_h == gap_area(c)
    assert (row.t50_s, row.t90_s, row.t95_s) == (500.0, 900.0, 900.0)


def test_identical_scenarios_give_identical_rows():
    c = _curve([0.0, 100.0], [50.0, 150.0])
    a, b = summarize_scenarios([("x", c), ("x", c)])
    assert a == b


def test_summarize_needs_a_scenario():
    with pytest.raises(MetricsError):
        summarize_scenarios([])


def test_stranded_scenario_row_has_infinite_gap():
    (row,) = summarize_scenarios([("s", _curve([0.0, 1.0], [5.0, None]))])
    assert row.gap_area_h == math.inf and row.t90_s == math.inf


def test_comparison_csv_layout():
    c = _curve([0.0, 100.0], [50.0, 150.0])
    text = comparison_csv(summarize_scenarios([("a", c)]))
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["scenario", "gap_area_h", "t50_s", "t90_s", "t95_s"]
    assert rows[1] == ["a", f"{50 / 3600:.6f}", "50", "150", "150"]


def test_curves_csv_ends_at_one():
    text = curves_csv(_curve([0.0, 100.0], [50.0, 150.0]))
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["t_s", "demand_frac", "finished_frac"]
    assert rows[1:] == [["0", "0.500000", "0.000000"], ["50", "0.500000", "0.500000"],
                        ["100", "1.000000", "0.500000"], ["150", "1.000000", "1.000000"]]


def test_curves_svg_is_well_formed():
    c = _curve([0.0, 100.0], [50.0, 150.0])
    root = ET.fromstring(curves_svg([("a", c), ("b", c)]))
    polylines = [el for el in root.iter() if el.tag.endswith("polyline")]
    assert len(polylines) == 4


def test_corridor_variants_strictly_decreasing():
    net = corridor_network()
    cf, _ = apply_policy(net, corridor_contraflow_script(net))
    gaps = []
    for n, mode in ((net, "fixed_shortest"), (net, "dynamic"), (cf, "dynamic")):
        d = generate_demand(n, SpatialAllocation(portion=1.0), GammaTemporal(0.5, 0.1), "exits",
                            mode, 1)
        out = run(n, d, (), SimConfig(record_trajectories=False))
        gaps.append(gap_area(build_curves(d, out.trips)))
    assert gaps[0] > gaps[1] > gaps[2]
