"""Command-line entry point: ``evacsim <command> ...``.

Exit codes: 0 success, 1 domain failure (validation findings, a policy edit
that cannot apply, a run that hit ``max_time_s``), 2 bad input (unreadable or
malformed files, invalid scenario fields).
"""

from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from . import metrics
from .demand import (DemandError, DemandSet, GammaTemporal, SpatialAllocation, generate_demand,
                     load_demand)
from .engine import SimConfig, as_closures, run
from .network import NetworkError, RoadNetwork, load_network, serialize_network, validate_network
from .pointprocess import (KINDS, PointProcessError, events_to_csv, model_from_dict, model_to_dict,
                           parse_events_csv, pp_fit, pp_simulate)
from .policy import PolicyError, apply_policy, load_policy

log = logging.getLogger("evacsim")

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
ROUTING_MODES = ("fixed_shortest", "dynamic")


class InputError(Exception):
    """Bad command input; maps to exit code 2."""


# -- scenarios -------------------------------------------------------------------

def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


def load_scenario(path) -> Tuple[dict, Path]:
    """Read a scenario JSON file; returns the dict and the directory paths resolve against."""
    p = Path(path)
    sc = _read_json(p)
    if not isinstance(sc, dict):
        raise InputError(f"{p}: scenario must be a JSON object")
    return sc, p.parent


def _resolve(base: Path, ref: Optional[str]) -> Optional[Path]:
    if ref is None:
        return None
    p = Path(ref)
    return p if p.is_absolute() else base / p


def _sim_config(sc: dict, seed: int) -> SimConfig:
    over = dict(sc.get("config") or {})
    known = {f.name for f in fields(SimConfig)}
    bad = sorted(set(over) - known)
    if bad:
        raise InputError(f"unknown config keys: {', '.join(bad)}")
    over.setdefault("seed", seed)
    try:
        return SimConfig(**over)
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad config: {exc}") from None


def _seed(sc: dict) -> int:
    if "seed" not in sc or isinstance(sc["seed"], bool) or not isinstance(sc["seed"], int):
        raise InputError("scenario needs an integer 'seed'")
    return sc["seed"]


def prepare(sc: dict, base: Path) -> Tuple[RoadNetwork, Optional[dict], DemandSet, list, SimConfig]:
    """Load and apply everything a run needs.

    Returns:
        network after the policy, the policy report (or None), demand, closures, config.
    """
    seed = _seed(sc)
    if "network" not in sc:
        raise InputError("scenario needs 'network'")
    net = load_network(_resolve(base, sc["network"]))
    report = None
    policy_closures = []
    if sc.get("policy"):
        net, rep = apply_policy(net, _load_policy(_resolve(base, sc["policy"])))
        report = rep.to_dict()
        policy_closures = list(rep.closures)
    dspec = sc.get("demand") or {}
    if "csv" in dspec:
        demand = load_demand(_resolve(base, dspec["csv"]))
        if dspec.get("routing_mode"):
            demand = demand.with_routing_mode(dspec["routing_mode"])
    else:
        mode = dspec.get("routing_mode", "fixed_shortest")
        if mode not in ROUTING_MODES:
            raise InputError(f"routing_mode must be one of {ROUTING_MODES}")
        if "destination" not in dspec:
            raise InputError("demand needs a 'destination' edge or TAZ id")
        try:
            temporal = GammaTemporal(**(dspec.get("temporal") or {}))
            spatial = SpatialAllocation(**(dspec.get("spatial") or {}))
        except TypeError as exc:
            raise InputError(f"bad demand parameters: {exc}") from None
        demand = generate_demand(net, spatial, temporal, dspec["destination"], mode, seed)
    try:
        closures = as_closures(policy_closures) + as_closures(sc.get("closures") or [])
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"bad closure entry: {exc}") from None
    for c in closures:
        if c.edge_id not in net.edges:
            raise InputError(f"closure on unknown edge {c.edge_id!r}")
    return net, report, demand, closures, _sim_config(sc, seed)


def _load_policy(path):
    # a malformed policy file is bad input; only application failures are domain failures
    try:
        return load_policy(path)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    except PolicyError as exc:
        raise InputError(f"{path}: {exc}") from None


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def run_scenario(sc: dict, base: Path, out: Path) -> dict:
    """Run one scenario and write every output file into ``out``; returns run stats."""
    net, report, demand, closures, cfg = prepare(sc, base)
    out.mkdir(parents=True, exist_ok=True)
    eff = {"scenario": sc, "sim_config": cfg.to_dict(), "n_trips": len(demand),
           "demand_warnings": list(demand.warnings)}
    _write(out / "effective_config.json", _dump(eff))
    _write(out / "network.json", serialize_network(net))
    if report is not None:
        _write(out / "policy_report.json", _dump(report))
    _write(out / "demand.csv", demand.to_csv())
    res = run(net, demand, closures, cfg)
    _write(out / "summary.csv", res.summary_csv())
    _write(out / "trips.csv", res.trips_csv())
    if cfg.record_trajectories:
        _write(out / "trajectories.csv", res.trajectory_csv())
    if cfg.speed_map_bin_s:
        sm = metrics.speed_map_from_cells(res.speed_cells, net, cfg.speed_map_bin_s)
        _write(out / "speed_map.csv", sm.to_csv())
    lines = ["t_s,vehicle_id,edge,wait_s"] + [f"{t:g},{v},{e},{w:g}" for t, v, e, w in
                                             res.teleport_events]
    _write(out / "teleports.csv", "\n".join(lines) + "\n")
    curve = metrics.build_curves(demand, res.trips)
    stats = {"trips": len(demand), "finished": res.n_finished, "stranded": res.n_stranded,
             "teleports": res.n_teleports, "incomplete": res.incomplete,
             "end_time_s": res.end_time_s,
             "gap_area_h": None if curve.flagged or not len(demand) else metrics.gap_area(curve)}
    _write(out / "stats.json", _dump(stats))
    return stats


# -- batch -----------------------------------------------------------------------

def set_dotted(d: dict, path: str, value) -> None:
    """Set ``value`` at a dotted path; integer parts index lists, missing dicts are created."""
    parts = path.split(".")
    cur = d
    for i, key in enumerate(parts):
        last = i == len(parts) - 1
        if isinstance(cur, list):
            try:
                idx = int(key)
                if last:
                    cur[idx] = value
                    return
                cur = cur[idx]
            except (ValueError, IndexError):
                raise InputError(f"axis {path!r}: bad list index {key!r}") from None
        elif isinstance(cur, dict):
            if last:
                cur[key] = value
                return
            cur = cur.setdefault(key, {})
        else:
            raise InputError(f"axis {path!r} walks into a scalar at {key!r}")


def _label(v) -> str:
    return json.dumps(v, sort_keys=True).replace(" ", "").replace('"', "")


def expand_batch(base: dict, axes: Dict[str, Sequence]) -> List[Tuple[str, dict, Dict[str, object]]]:
    """Sorted cross product of axis values applied to copies of ``base``.

    Axis names are sorted; values keep the order given. Returns
    ``(scenario_id, scenario, {axis: value})`` triples.
    """
    names = sorted(axes)
    for n in names:
        if not isinstance(axes[n], list) or not axes[n]:
            raise InputError(f"axis {n!r} needs a nonempty list of values")
    out = []
    for k, combo in enumerate(itertools.product(*(axes[n] for n in names))):
        sc = copy.deepcopy(base)
        for n, v in zip(names, combo):
            set_dotted(sc, n, v)
        sid = f"{k:03d}_" + "_".join(f"{n.split('.')[-1]}={_label(v)}" for n, v in zip(names, combo))
        out.append((sid, sc, dict(zip(names, combo))))
    return out


def _batch_worker(args) -> Tuple[str, dict]:
    sid, sc, base, out = args
    try:
        return sid, run_scenario(sc, Path(base), Path(out))
    except (InputError, NetworkError, PolicyError, DemandError, OSError) as exc:
        return sid, {"error": str(exc)}


# -- commands --------------------------------------------------------------------

def cmd_validate(a) -> int:
    net = load_network(a.network)
    rep = validate_network(net)
    if rep.ok:
        print(f"{a.network}: no findings")
        return EXIT_OK
    print(str(rep))
    return EXIT_FAIL


def _scenario_from_args(a) -> Tuple[dict, Path]:
    if a.scenario:
        sc, base = load_scenario(a.scenario)
    else:
        sc, base = {}, Path.cwd()
    if getattr(a, "network", None):
        sc["network"] = str(Path(a.network).resolve())
    if getattr(a, "policy", None):
        sc["policy"] = str(Path(a.policy).resolve())
    if getattr(a, "seed", None) is not None:
        sc["seed"] = a.seed
    return sc, base


def cmd_generate(a) -> int:
    sc, base = _scenario_from_args(a)
    if "csv" in (sc.get("demand") or {}):
        raise InputError("generate needs inline demand parameters, not a demand CSV")
    _, _, demand, _, _ = prepare(sc, base)
    for w in demand.warnings:
        log.warning("%s", w)
    if a.out:
        _write(Path(a.out), demand.to_csv())
        print(f"{len(demand)} trips -> {a.out}")
    else:
        sys.stdout.write(demand.to_csv())
    return EXIT_OK


def cmd_apply_policy(a) -> int:
    net = load_network(a.network)
    script = _load_policy(a.policy)
    try:
        new, rep = apply_policy(net, script)
    except PolicyError as exc:
        print(f"policy failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    _write(Path(a.out), serialize_network(new))
    for w in rep.warnings:
        print(f"warning: {w}")
    print(f"{len(script.edits)} edits applied, {len(rep.dropped_connections)} connections dropped "
          f"-> {a.out}")
    return EXIT_OK


def cmd_run(a) -> int:
    sc, base = _scenario_from_args(a)
    out = Path(a.out or sc.get("out") or "out")
    stats = run_scenario(sc, base, out)
    gap = stats["gap_area_h"]
    print(f"finished {stats['finished']}/{stats['trips']}, stranded {stats['stranded']}, "
          f"teleports {stats['teleports']}, gap area "
          f"{'n/a' if gap is None else f'{gap:.4f} h'} -> {out}")
    return EXIT_FAIL if stats["incomplete"] else EXIT_OK


class _TripRow:
    """Trip row read back from ``trips.csv``."""

    __slots__ = ("arrive_s", "status")

    def __init__(self, row: dict):
        self.status = row["status"]
        self.arrive_s = float(row["arrive_s"]) if row["arrive_s"] else None


def _curve_from_dir(d: Path) -> metrics.EvacCurve:
    demand = load_demand(d / "demand.csv")
    with open(d / "trips.csv", encoding="utf-8") as fh:
        rows = [_TripRow(r) for r in csv.DictReader(fh)]
    return metrics.build_curves(demand, rows)


def cmd_analyze(a) -> int:
    out = Path(a.out or "analysis")
    out.mkdir(parents=True, exist_ok=True)
    named = []
    for d in a.runs:
        d = Path(d)
        if not (d / "trips.csv").exists() or not (d / "demand.csv").exists():
            raise InputError(f"{d} is not a run output directory")
        sid = d.resolve().name
        curve = _curve_from_dir(d)
        named.append((sid, curve))
        _write(out / f"curves_{sid}.csv", metrics.curves_csv(curve))
        if curve.flagged:
            print(f"{sid}: {curve.stranded} stranded vehicles, gap area undefined")
        else:
            print(f"{sid}: gap area {metrics.gap_area(curve):.4f} h")
        if a.svg and (d / "network.json").exists():
            net = load_network(d / "network.json")
            if (d / "trajectories.csv").exists():
                with open(d / "trajectories.csv", encoding="utf-8") as fh:
                    rows = [(float(r["t_s"]), r["vehicle_id"], r["edge"], int(r["lane"]),
                             float(r["pos_m"]), float(r["speed_mps"])) for r in csv.DictReader(fh)]
                sm = metrics.build_speed_map(rows, net, a.bin_s)
                _write(out / f"speed_map_{sid}.csv", sm.to_csv())
                _write(out / f"speed_map_{sid}.svg", metrics.speed_map_svg(sm, net, a.bin))
    rows = sorted(metrics.summarize_scenarios(named), key=lambda r: (r.gap_area_h, r.scenario))
    _write(out / "comparison.csv", metrics.comparison_csv(rows))
    if a.svg:
        _write(out / "curves.svg", metrics.curves_svg(named))
    if len(rows) > 1:
        for r in rows:
            print(f"  {r.scenario:30s} {r.gap_area_h:8.4f} h")
    return EXIT_OK


def cmd_batch(a) -> int:
    spec_path = Path(a.scenario)
    spec = _read_json(spec_path)
    if not isinstance(spec, dict) or "base" not in spec:
        raise InputError("batch spec needs 'base' (scenario path or object) and 'axes'")
    if isinstance(spec["base"], str):
        base_sc, base_dir = load_scenario(_resolve(spec_path.parent, spec["base"]))
    else:
        base_sc, base_dir = spec["base"], spec_path.parent
    if a.seed is not None:
        base_sc["seed"] = a.seed
    jobs = expand_batch(base_sc, spec.get("axes") or {})
    out = Path(a.out or spec.get("out") or "batch_out")
    out.mkdir(parents=True, exist_ok=True)
    args = [(sid, sc, str(base_dir), str(out / sid)) for sid, sc, _ in jobs]
    workers = max(1, a.workers)
    if workers == 1:
        results = [_batch_worker(x) for x in args]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_batch_worker, args))
    axis_names = sorted(spec.get("axes") or {})
    lines = [",".join(["scenario"] + axis_names + ["gap_area_h", "t50_s", "t90_s", "t95_s",
                                                    "finished", "stranded", "teleports"])]
    failed = 0
    for (sid, sc, values), (_, st) in zip(jobs, results):
        vals = [_label(values[n]).replace(",", ";") for n in axis_names]
        if "error" in st:
            failed += 1
            print(f"{sid}: error: {st['error']}", file=sys.stderr)
            lines.append(",".join([sid] + vals + ["error"] * 4 + ["", "", ""]))
            continue
        c = _curve_from_dir(out / sid)
        r = metrics.summarize_scenarios([(sid, c)])[0]
        lines.append(",".join([sid] + vals + [f"{r.gap_area_h:.6f}", metrics._num(r.t50_s),
                                              metrics._num(r.t90_s), metrics._num(r.t95_s),
                                              str(st["finished"]), str(st["stranded"]),
                                              str(st["teleports"])]))
        print(f"{sid}: gap area {r.gap_area_h:.4f} h")
    _write(out / "batch_summary.csv", "\n".join(lines) + "\n")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_fit_pp(a) -> int:
    try:
        events = parse_events_csv(Path(a.events).read_text(encoding="utf-8"))
    except OSError as exc:
        raise InputError(f"cannot read {a.events}: {exc.strerror}") from None
    if a.window:
        window = (a.window[0], a.window[1])
    elif events:
        window = (0.0, events[-1].t)
    else:
        raise InputError("no events and no --window")
    breaks = None
    if a.bins and a.bins > 1:
        w = (window[1] - window[0]) / a.bins
        breaks = [window[0] + k * w for k in range(a.bins)] + [window[1]]
    res = pp_fit(events, a.family, window, breaks=breaks, max_iter=a.max_iter)
    doc = {"model": model_to_dict(res.model), "loglik": res.loglik, "converged": res.converged,
           "iterations": res.iterations, "n_events": len(events)}
    text = _dump(doc)
    if a.out:
        _write(Path(a.out), text)
    sys.stdout.write(text)
    return EXIT_OK if res.converged else EXIT_FAIL


def cmd_simulate_pp(a) -> int:
    doc = _read_json(Path(a.model))
    try:
        model = model_from_dict(doc.get("model", doc))
    except (KeyError, TypeError) as exc:
        raise InputError(f"bad model file: {exc}") from None
    events = pp_simulate(model, a.seed)
    text = events_to_csv(events)
    if a.out:
        _write(Path(a.out), text)
        print(f"{len(events)} events -> {a.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evacsim", description="Evacuation traffic simulation pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", help="check a network file")
    s.add_argument("network", nargs="?")
    s.add_argument("--network", dest="network_opt")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("generate", help="write a demand CSV for a scenario")
    s.add_argument("--scenario")
    s.add_argument("--network")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("apply-policy", help="apply a policy script to a network")
    s.add_argument("--network", required=True)
    s.add_argument("--policy", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_apply_policy)

    s = sub.add_parser("run", help="simulate one scenario")
    s.add_argument("--scenario")
    s.add_argument("--network")
    s.add_argument("--policy")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("analyze", help="curves, gap areas and speed maps from run outputs")
    s.add_argument("runs", nargs="+")
    s.add_argument("--out")
    s.add_argument("--svg", action="store_true")
    s.add_argument("--bin", type=int, default=0, help="speed-map bin index for the SVG")
    s.add_argument("--bin-s", dest="bin_s", type=float, default=1800.0)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("batch", help="run the cross product of scenario axes")
    s.add_argument("--scenario", required=True, help="batch spec JSON")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_batch)

    s = sub.add_parser("fit-pp", help="fit a point-process model to an event CSV")
    s.add_argument("events")
    s.add_argument("--family", choices=KINDS, default="hawkes")
    s.add_argument("--window", type=float, nargs=2)
    s.add_argument("--bins", type=int, default=1)
    s.add_argument("--max-iter", dest="max_iter", type=int, default=10_000)
    s.add_argument("--out")
    s.set_defaults(func=cmd_fit_pp)

    s = sub.add_parser("simulate-pp", help="simulate events from a fitted model file")
    s.add_argument("--model", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate_pp)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get("EVACSIM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    if a.command == "validate":
        a.network = a.network or a.network_opt
        if not a.network:
            print("validate needs a network file", file=sys.stderr)
            return EXIT_INPUT
    try:
        return a.func(a)
    except (InputError, NetworkError, DemandError, PointProcessError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PolicyError as exc:
        print(f"policy failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except FileNotFoundError as exc:
        print(f"error: no such file {exc.filename}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
