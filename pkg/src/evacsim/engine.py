"""Discrete-time microscopic simulation.

One step of length ``dt`` runs, in order: closure activation, insertion of
queued departures and teleported vehicles, a lane-change pass, the speed and
position update (junction admission is decided inside it), the wait-timer and
teleport check, output recording, and the periodic reroute and travel-time
refresh.

Lanes are lists ordered leader first and are updated front to back, so every
vehicle sees its leader's new position. Lanes themselves are visited
downstream first (by distance to the nearest sink); a lane head that reads
the tail of a lane not yet moved settles that lane first. The advance is
capped to keep ``min_gap`` to whatever is ahead, but braking never exceeds
``decel``: after a cut-in or merge a vehicle may eat into ``min_gap``, never
into the vehicle ahead.
"""

from __future__ import annotations

import csv
import heapq
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .demand import DemandSet, Trip
from .network import RoadNetwork, movements_conflict, node_connections
from .routing import INF, Route, Router, TravelTimeTable

log = logging.getLogger(__name__)

STOP_SPEED = 0.1  # below this a lane head counts as waiting


class EngineError(RuntimeError):
    pass


def safe_speed(v_self: float, v_leader: float, gap_m: float, decel_max: float,
               reaction_time_s: float) -> float:
    """Krauss safe speed; ``v_self`` is unused by the closed form but kept for the signature."""
    if gap_m <= 0 and v_leader <= 0:
        return 0.0
    bt = decel_max * reaction_time_s
    return max(0.0, -bt + math.sqrt(bt * bt + v_leader * v_leader + 2.0 * decel_max * max(gap_m, 0.0)))


@dataclass
class SimConfig:
    step_s: float = 1.0
    teleport_threshold_s: float = 300.0
    reroute_period_s: float = 60.0
    # "global": every vehicle reroutes on the same ticks; "per_vehicle": periods count from insertion
    reroute_phase: str = "global"
    tt_refresh_period_s: float = 300.0
    max_time_s: float = 86400.0
    seed: int = 0
    accel: float = 2.6
    decel: float = 4.5
    reaction_time_s: float = 1.0
    length_m: float = 5.0
    min_gap_m: float = 2.5
    sigma_dawdle: float = 0.5
    speed_dev: float = 0.1
    # clipped so the speed-map bound of limit x 1.05 holds
    speed_factor_min: float = 0.8
    speed_factor_max: float = 1.05
    yield_gap_s: float = 4.0
    lane_change_cooldown_s: float = 3.0
    record_trajectories: bool = True
    speed_map_bin_s: Optional[float] = 1800.0
    check_invariants: bool = False

    def __post_init__(self):
        if not self.step_s > 0:
            raise ValueError("step_s must be positive")
        for name in ("teleport_threshold_s", "reroute_period_s", "tt_refresh_period_s",
                     "max_time_s", "accel", "decel", "reaction_time_s", "length_m"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.reroute_phase not in ("global", "per_vehicle"):
            raise ValueError(f"unknown reroute_phase {self.reroute_phase!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ClosureEvent:
    edge_id: str
    start_s: float
    end_s: float

    def __post_init__(self):
        if not self.start_s < self.end_s:
            raise ValueError("closure needs start_s < end_s")


def as_closures(items: Iterable) -> List[ClosureEvent]:
    out = []
    for c in items:
        if isinstance(c, ClosureEvent):
            out.append(c)
        elif isinstance(c, dict):
            out.append(ClosureEvent(c.get("edge_id", c.get("edge")), float(c["start_s"]),
                                    float(c["end_s"])))
        else:
            out.append(ClosureEvent(c.edge, float(c.start_s), float(c.end_s)))
    return out


# -- runtime structures --------------------------------------------------------

class _Lane:
    __slots__ = ("edge", "index", "key", "length", "vehs", "to", "conns", "frm")

    def __init__(self, edge, index):
        self.edge = edge
        self.index = index
        self.key = (edge.id, index)
        self.length = edge.length
        self.vehs: List["Vehicle"] = []
        self.to: Dict[str, List["_Lane"]] = {}
        self.conns: Dict[Tuple[str, int], "_Conn"] = {}
        self.frm: List["_Lane"] = []


class _Edge:
    __slots__ = ("id", "length", "limit", "lanes", "lc", "closed", "node", "free", "ctrl",
                 "program", "n_occ", "comp_sum", "comp_n", "oldest")

    def __init__(self, e, node):
        self.id = e.id
        self.length = e.length
        self.limit = e.speed_limit
        self.lanes: List[_Lane] = []
        self.lc = e.lane_change_allowed and e.num_lanes > 1
        self.closed = False
        self.node = node
        self.ctrl = node.control
        self.program = None
        self.free = e.free_flow_time
        self.n_occ = 0
        self.comp_sum = 0.0
        self.comp_n = 0


class _Conn:
    __slots__ = ("c", "id", "src", "dst", "yields", "rivals", "mergers", "ctrl", "program")

    def __init__(self, c, src, dst):
        self.c = c
        self.id = c.id
        self.src = src
        self.dst = dst
        self.yields = c.yield_required
        self.rivals: List["_Conn"] = []
        self.mergers: List["_Conn"] = []
        self.ctrl = "none"
        self.program = None


class Vehicle:
    __slots__ = ("id", "trip", "idx", "edge", "lane", "pos", "speed", "route", "ri", "factor",
                 "desired", "wait", "mode", "dest", "enter_t", "moved", "nconn", "nlane",
                 "stopped_at", "lc_t", "state", "teleports", "length")

    def __init__(self, trip: Trip, idx: int, factor: float, length: float):
        self.id = trip.vehicle_id
        self.trip = trip
        self.idx = idx
        self.factor = factor
        self.length = length
        self.edge: Optional[_Edge] = None
        self.lane: Optional[_Lane] = None
        self.pos = 0.0
        self.speed = 0.0
        self.route: Tuple[str, ...] = ()
        self.ri = 0
        self.desired = 0.0
        self.wait = 0.0
        self.mode = trip.routing_mode
        self.dest = trip.destination
        self.enter_t: Optional[float] = None
        self.moved = -1
        self.nconn: Optional[_Conn] = None
        self.nlane: Optional[_Lane] = None
        self.stopped_at: Optional[float] = None
        self.lc_t = -INF
        self.state = "pending"
        self.teleports = 0


@dataclass
class TripRecord:
    vehicle_id: str
    depart_s: float
    arrive_s: Optional[float]
    status: str
    insert_s: Optional[float] = None
    teleports: int = 0


@dataclass
class SimOutputs:
    summary: List[Tuple[float, int, int, int, int, int, int]] = field(default_factory=list)
    trips: List[TripRecord] = field(default_factory=list)
    trajectories: Dict[str, list] = field(default_factory=dict)
    speed_cells: Dict[Tuple[str, int], List[float]] = field(default_factory=dict)
    teleport_events: List[Tuple[float, str, str, float]] = field(default_factory=list)
    wait_by_edge: Dict[str, float] = field(default_factory=dict)
    incomplete: bool = False
    end_time_s: float = 0.0
    config: Dict[str, object] = field(default_factory=dict)

    SUMMARY_HEADER = ("t_s", "loaded", "inserted", "running", "finished", "teleports", "stranded")
    TRAJ_HEADER = ("t_s", "vehicle_id", "edge", "lane", "pos_m", "speed_mps")
    TRIPS_HEADER = ("vehicle_id", "depart_s", "arrive_s", "status")

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.SUMMARY_HEADER)
        for row in self.summary:
            w.writerow((_fmt_t(row[0]),) + tuple(row[1:]))
        return buf.getvalue()

    def trips_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.TRIPS_HEADER)
        for r in self.trips:
            w.writerow((r.vehicle_id, f"{r.depart_s:.3f}",
                        "" if r.arrive_s is None else _fmt_t(r.arrive_s), r.status))
        return buf.getvalue()

    def trajectory_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(self.TRAJ_HEADER) + "\n")
        tr = self.trajectories
        if tr:
            for t, v, e, ln, p, s in zip(tr["t"], tr["id"], tr["edge"], tr["lane"], tr["pos"],
                                         tr["speed"]):
                buf.write(f"{_fmt_t(t)},{v},{e},{ln},{p:.2f},{s:.2f}\n")
        return buf.getvalue()

    def trajectory_rows(self):
        tr = self.trajectories
        if not tr:
            return []
        return list(zip(tr["t"], tr["id"], tr["edge"], tr["lane"], tr["pos"], tr["speed"]))

    def counts(self, t_index: int = -1) -> Dict[str, int]:
        row = self.summary[t_index]
        return dict(zip(self.SUMMARY_HEADER, row))

    @property
    def n_finished(self) -> int:
        return sum(1 for r in self.trips if r.status == "finished")

    @property
    def n_stranded(self) -> int:
        return sum(1 for r in self.trips if r.status == "stranded")

    @property
    def n_teleports(self) -> int:
        return len(self.teleport_events)


def _fmt_t(t: float) -> str:
    return str(int(t)) if float(t).is_integer() else f"{t:.3f}"


# -- world ---------------------------------------------------------------------

class World:
    """Mutable simulation state. Use :func:`run` unless stepping manually."""

    def __init__(self, net: RoadNetwork, demand: DemandSet, closures: Iterable = (),
                 config: Optional[SimConfig] = None):
        self.net = net
        self.cfg = cfg = config or SimConfig()
        self.rng = np.random.default_rng(cfg.seed)
        self.router = Router(net)
        self.tt = TravelTimeTable(net)
        self.closures = sorted(as_closures(closures), key=lambda c: (c.start_s, c.edge_id))
        for c in self.closures:
            if c.edge_id not in net.edges:
                raise EngineError(f"closure on unknown edge {c.edge_id!r}")
        self.closed: frozenset = frozenset()
        self.t = 0.0
        self.out = SimOutputs(config=cfg.to_dict())
        if cfg.record_trajectories:
            self.out.trajectories = {k: [] for k in ("t", "id", "edge", "lane", "pos", "speed")}
        self._build(net)
        for trip in demand.trips:
            for e in (trip.origin_edge,):
                if e not in net.edges:
                    raise EngineError(f"trip {trip.vehicle_id}: unknown origin {e!r}")
            try:
                net.resolve_destination(trip.destination)
            except KeyError:
                raise EngineError(f"trip {trip.vehicle_id}: unknown destination "
                                  f"{trip.destination!r}") from None
        self.trips = sorted(demand.trips, key=lambda tr: (tr.depart_s, tr.vehicle_id))
        self.next_trip = 0
        self.queues: Dict[str, List[Vehicle]] = {}
        self.limbo: List[Vehicle] = []
        self.running: List[Vehicle] = []
        self.records: Dict[str, TripRecord] = {}
        self.n_loaded = self.n_inserted = self.n_finished = self.n_stranded = 0
        self.n_teleports = 0
        self.step_no = 0

    def _build(self, net: RoadNetwork) -> None:
        self.edges: Dict[str, _Edge] = {}
        for e in net.edges.values():
            re_ = _Edge(e, net.nodes[e.to_node])
            re_.lanes = [_Lane(re_, i) for i in range(e.num_lanes)]
            if re_.ctrl == "traffic_light":
                re_.program = net.signals.get(net.nodes[e.to_node].program_id)
            self.edges[e.id] = re_
        self.lane_order: List[_Lane] = [ln for eid in sorted(self.edges)
                                        for ln in self.edges[eid].lanes]
        conns: Dict[str, _Conn] = {}
        for c in net.connections:
            if not net.lane_valid(c):
                continue
            src = self.edges[c.from_edge].lanes[c.from_lane]
            dst = self.edges[c.to_edge].lanes[c.to_lane]
            rc = _Conn(c, src, dst)
            node = net.nodes[net.edges[c.from_edge].to_node]
            rc.ctrl = node.control
            rc.program = self.edges[c.from_edge].program
            conns[c.id] = rc
            src.to.setdefault(c.to_edge, []).append(dst)
            src.conns[(c.to_edge, c.to_lane)] = rc
            if src not in dst.frm:
                dst.frm.append(src)
        for ln in self.lane_order:
            for k in ln.to:
                ln.to[k].sort(key=lambda x: x.index)
        # movement runs downstream first so a vehicle crossing a junction usually sees
        # the new position of the tail it follows; ties and cycles fall back to edge id
        dist = self._sink_distance(net)
        self.move_order: List[_Lane] = [ln for eid in sorted(self.edges, key=lambda e: (dist.get(e, INF), e))
                                        for ln in self.edges[eid].lanes]
        for node in net.nodes.values():
            nc = [conns[c.id] for c in node_connections(net, node.id) if c.id in conns]
            if node.control == "traffic_light":
                continue
            for rc in nc:
                rc.mergers = [o for o in nc if o.dst is rc.dst and o.src.edge is not rc.src.edge]
            for rc in nc:
                if not (rc.yields or node.control == "all_way_stop"):
                    continue
                for other in nc:
                    if other is rc or other.src.edge is rc.src.edge:
                        continue
                    if node.control != "all_way_stop" and other.yields:
                        continue
                    if movements_conflict(net, rc.c, other.c):
                        rc.rivals.append(other)

    # -- routing helpers -------------------------------------------------------

    def _route(self, veh: Vehicle, from_edge: str) -> Route:
        if veh.mode == "dynamic":
            return self.router.fastest(self.tt, from_edge, veh.dest, self.closed)
        return self.router.shortest(from_edge, veh.dest, frozenset())

    def _reroute(self, veh: Vehicle) -> None:
        r = self.router.fastest(self.tt, veh.edge.id, veh.dest, self.closed)
        if r.reachable:
            veh.route = r.edges
            veh.ri = 0

    def _closure_end(self, edge_id: str, t: float) -> float:
        end = t
        for c in self.closures:
            if c.edge_id == edge_id and c.start_s <= end < c.end_s:
                end = c.end_s
        return end

    # -- phases ----------------------------------------------------------------

    def _update_closures(self, t: float) -> None:
        closed = frozenset(c.edge_id for c in self.closures if c.start_s <= t < c.end_s)
        if closed == self.closed:
            return
        newly = closed - self.closed
        self.closed = closed
        for eid, e in self.edges.items():
            e.closed = eid in closed
        if newly:
            for veh in self.running:
                if veh.mode == "dynamic" and veh.state == "running" and \
                        any(x in newly for x in veh.route[veh.ri + 1:]):
                    self._reroute(veh)

    @staticmethod
    def _sink_distance(net: RoadNetwork) -> Dict[str, float]:
        """Length of the shortest connection path from each edge's start to a TAZ edge's end."""
        preds: Dict[str, set] = {}
        for c in net.connections:
            preds.setdefault(c.to_edge, set()).add(c.from_edge)
        dist: Dict[str, float] = {}
        heap = [(net.edges[e].length, e) for taz in net.tazs.values() for e in taz.edges
                if e in net.edges]
        heapq.heapify(heap)
        while heap:
            d, e = heapq.heappop(heap)
            if e in dist:
                continue
            dist[e] = d
            for p in preds.get(e, ()):
                if p not in dist:
                    heapq.heappush(heap, (d + net.edges[p].length, p))
        return dist

    def _draw_factor(self) -> float:
        cfg = self.cfg
        f = self.rng.normal(1.0, cfg.speed_dev)
        return float(min(max(f, cfg.speed_factor_min), cfg.speed_factor_max))

    def _space_ok(self, lane: _Lane, pos: float, length: float, speed: float) -> Optional[int]:
        """Insertion index into ``lane`` for a vehicle at ``pos`` and ``speed``, or None."""
        cfg = self.cfg
        vehs = lane.vehs
        i = 0
        n = len(vehs)
        while i < n and vehs[i].pos >= pos:
            i += 1
        if i > 0:
            ld = vehs[i - 1]
            gap = ld.pos - ld.length - cfg.min_gap_m - pos
            if gap < 0 or safe_speed(speed, ld.speed, gap, cfg.decel, cfg.reaction_time_s) < speed - 1e-9:
                return None
        if i < n:
            fw = vehs[i]
            gap = pos - length - cfg.min_gap_m - fw.pos
            if gap < 0:
                return None
            vs = safe_speed(fw.speed, speed, gap, cfg.decel, cfg.reaction_time_s)
            if vs < fw.speed - cfg.decel * cfg.step_s:
                return None
        elif pos - length < cfg.min_gap_m + 50.0:
            # no follower here: a head about to cross in from upstream must not need to brake hard
            for src in lane.frm:
                if not src.vehs:
                    continue
                h = src.vehs[0]
                if h.ri + 1 >= len(h.route) or h.route[h.ri + 1] != lane.edge.id:
                    continue
                gap = src.length - h.pos + pos - length - cfg.min_gap_m
                if gap < 0:
                    return None
                vs = safe_speed(h.speed, speed, gap, cfg.decel, cfg.reaction_time_s)
                if vs < h.speed - cfg.decel * cfg.step_s:
                    return None
        return i

    def _place(self, veh: Vehicle, edge: _Edge, pos: float, next_edge: Optional[str],
               after: Optional[str]) -> bool:
        lanes = edge.lanes
        if next_edge is not None:
            good = [ln for ln in lanes if next_edge in ln.to]
            if after is not None:
                better = [ln for ln in good if any(after in t.to for t in ln.to[next_edge])]
                good = better or good
            lanes = good or lanes
        best = None
        for ln in lanes:
            idx = self._space_ok(ln, pos, veh.length, 0.0)
            if idx is None:
                continue
            room = ln.vehs[idx - 1].pos - ln.vehs[idx - 1].length - pos if idx > 0 else INF
            if best is None or room > best[0]:
                best = (room, ln, idx)
        if best is None:
            return False
        _, ln, idx = best
        ln.vehs.insert(idx, veh)
        veh.lane = ln
        veh.edge = edge
        veh.pos = pos
        veh.speed = 0.0
        veh.desired = veh.factor * edge.limit
        veh.wait = 0.0
        veh.stopped_at = None
        veh.state = "running"
        veh.nconn = veh.nlane = None
        edge.n_occ += 1
        return True

    def _insert(self, t: float) -> None:
        trips = self.trips
        while self.next_trip < len(trips) and trips[self.next_trip].depart_s <= t:
            trip = trips[self.next_trip]
            veh = Vehicle(trip, self.next_trip, self._draw_factor(), self.cfg.length_m)
            self.queues.setdefault(trip.origin_edge, []).append(veh)
            self.records[trip.vehicle_id] = TripRecord(trip.vehicle_id, trip.depart_s, None, "pending")
            self.next_trip += 1
            self.n_loaded += 1
        for eid in sorted(self.queues):
            q = self.queues[eid]
            while q:
                veh = q[0]
                if not veh.route:
                    r = self._route(veh, eid)
                    if not r.reachable:
                        q.pop(0)
                        self._strand(veh, t, "no route at departure")
                        continue
                    veh.route = r.edges
                    veh.ri = 0
                edge = self.edges[eid]
                length = edge.length
                pos = min(max(veh.trip.origin_pos_m, min(veh.length, length)), length)
                nxt = veh.route[1] if len(veh.route) > 1 else None
                aft = veh.route[2] if len(veh.route) > 2 else None
                if not self._place(veh, edge, pos, nxt, aft):
                    break
                q.pop(0)
                veh.enter_t = None
                self.running.append(veh)
                self.n_inserted += 1
                self.records[veh.id].insert_s = t
                self.records[veh.id].status = "running"
            if not q:
                del self.queues[eid]
        # teleported vehicles scan forward one edge per step
        keep = []
        for veh in self.limbo:
            if veh.ri >= len(veh.route):
                self._finish(veh, t)
                continue
            eid = veh.route[veh.ri]
            edge = self.edges[eid]
            if edge.closed:
                if veh.mode == "dynamic" and veh.ri > 0:
                    r = self.router.fastest(self.tt, veh.route[veh.ri - 1], veh.dest, self.closed)
                    if r.reachable and len(r.edges) > 1:
                        veh.route = r.edges
                        veh.ri = 1
                        keep.append(veh)
                        continue
                if self._closure_end(eid, t) >= self.cfg.max_time_s:
                    self._strand(veh, t, f"blocked by closure of {eid}")
                    continue
                keep.append(veh)
                continue
            nxt = veh.route[veh.ri + 1] if veh.ri + 1 < len(veh.route) else None
            aft = veh.route[veh.ri + 2] if veh.ri + 2 < len(veh.route) else None
            if self._place(veh, edge, min(veh.length, edge.length), nxt, aft):
                veh.enter_t = None
            else:
                veh.ri += 1
                keep.append(veh)
        self.limbo = keep

    def _strand(self, veh: Vehicle, t: float, why: str) -> None:
        veh.state = "stranded"
        rec = self.records[veh.id]
        rec.status = "stranded"
        if veh in self.running:
            self.running.remove(veh)
        self.n_stranded += 1
        if rec.insert_s is None:
            # stranded before insertion still counts as inserted for conservation
            self.n_inserted += 1
            rec.insert_s = t
        log.debug("vehicle %s stranded at %.0f: %s", veh.id, t, why)

    def _finish(self, veh: Vehicle, t: float) -> None:
        veh.state = "finished"
        rec = self.records[veh.id]
        rec.status = "finished"
        rec.arrive_s = t
        rec.teleports = veh.teleports
        self.n_finished += 1

    # -- lane changing -----------------------------------------------------------

    def _lane_changes(self, t: float) -> None:
        cfg = self.cfg
        for ln in self.lane_order:
            edge = ln.edge
            if not edge.lc or not ln.vehs:
                continue
            for veh in list(ln.vehs):
                if t - veh.lc_t < cfg.lane_change_cooldown_s:
                    continue
                nxt = veh.route[veh.ri + 1] if veh.ri + 1 < len(veh.route) else None
                cur = veh.lane
                need = nxt is not None and nxt not in cur.to
                cands = []
                for d in (-1, 1):
                    j = cur.index + d
                    if 0 <= j < len(edge.lanes):
                        cands.append(edge.lanes[j])
                if need:
                    ok = [c for c in cands if nxt in c.to]
                    if not ok:
                        # step toward the side that has a connecting lane
                        conn_idx = [x.index for x in edge.lanes if nxt in x.to]
                        if not conn_idx:
                            continue
                        target = min(conn_idx, key=lambda j: (abs(j - cur.index), j))
                        step = 1 if target > cur.index else -1
                        ok = [edge.lanes[cur.index + step]]
                    targets = ok
                else:
                    i = cur.vehs.index(veh)
                    if i == 0:
                        continue
                    ld = cur.vehs[i - 1]
                    gap_cur = ld.pos - ld.length - veh.pos
                    targets = []
                    for c in cands:
                        if nxt is not None and nxt not in c.to:
                            continue
                        lead = None
                        for o in c.vehs:
                            if o.pos >= veh.pos:
                                lead = o
                            else:
                                break
                        gap_new = (lead.pos - lead.length - veh.pos) if lead else \
                            (edge.length - veh.pos)
                        if gap_new >= 2.0 * gap_cur and gap_new > gap_cur + cfg.length_m:
                            targets.append(c)
                for c in targets:
                    idx = self._space_ok(c, veh.pos, veh.length, veh.speed)
                    if idx is None:
                        continue
                    cur.vehs.remove(veh)
                    c.vehs.insert(idx, veh)
                    veh.lane = c
                    veh.lc_t = t
                    veh.wait = 0.0
                    veh.stopped_at = None
                    break

    # -- junction admission --------------------------------------------------------

    def _pick_lane(self, lane: _Lane, nxt: str, after: Optional[str]) -> Optional[_Lane]:
        targets = lane.to.get(nxt)
        if not targets:
            return None
        if len(targets) == 1:
            return targets[0]
        if after is not None:
            onward = [x for x in targets if after in x.to]
            targets = onward or targets
        best, room = None, -INF
        for x in targets:
            r = (x.vehs[-1].pos - x.vehs[-1].length) if x.vehs else x.length
            if r > room:
                best, room = x, r
        return best

    def _admitted(self, veh: Vehicle, conn: _Conn, t: float) -> bool:
        if conn.dst.edge.closed:
            return False
        ctrl = conn.ctrl
        if ctrl == "traffic_light":
            prog = conn.program
            return prog is None or conn.id in prog.phase_at(t).green
        if ctrl == "all_way_stop":
            if veh.stopped_at is None:
                return False
            for r in conn.rivals:
                src = r.src
                if src.vehs:
                    h = src.vehs[0]
                    if h.nconn is r and h.stopped_at is not None and \
                            (h.stopped_at, h.idx) < (veh.stopped_at, veh.idx):
                        return False
            return True
        # vehicles already stopped at a merge go first come, first served
        for r in conn.mergers:
            src = r.src
            if src.vehs:
                h = src.vehs[0]
                if h.nconn is r and h.stopped_at is not None and (
                        veh.stopped_at is None or (h.stopped_at, h.idx) < (veh.stopped_at, veh.idx)):
                    return False
        # a rival that can no longer stop comfortably always goes; otherwise moving
        # vehicles merge zipper style and the earlier arrival goes
        if conn.mergers:
            cfg = self.cfg
            b, dt = cfg.decel, cfg.step_s
            bt = b * cfg.reaction_time_s
            mine = ((veh.lane.length - veh.pos) / max(veh.speed, STOP_SPEED), veh.lane.key)
            for r in conn.mergers:
                src = r.src
                if not src.vehs:
                    continue
                h = src.vehs[0]
                if h.speed < STOP_SPEED or h.ri + 1 >= len(h.route) or \
                        h.route[h.ri + 1] != conn.dst.edge.id:
                    continue
                hd = src.length - h.pos
                if -bt + math.sqrt(bt * bt + 2.0 * b * hd) < h.speed - b * dt:
                    return False
                theirs = (hd / h.speed, src.key)
                if veh.stopped_at is None and theirs < mine and theirs[0] <= cfg.yield_gap_s:
                    return False
        if conn.yields:
            lim = self.cfg.yield_gap_s
            for r in conn.rivals:
                src = r.src
                if src.vehs:
                    h = src.vehs[0]
                    if h.nconn is r and h.speed >= STOP_SPEED and \
                            (src.length - h.pos) / h.speed <= lim:
                        return False
        return True

    def _head_limits(self, veh: Vehicle, lane: _Lane, v: float, vmax: float,
                     t: float) -> Tuple[float, float, float]:
        """Speed limit, advance cap and contact limit for the first vehicle on a lane.

        The cap keeps ``min_gap`` to whatever is ahead; the contact limit only
        keeps the vehicles from touching. Sets ``veh.nlane`` to the lane it will
        enter if it crosses this step.
        """
        cfg = self.cfg
        b, dt = cfg.decel, cfg.step_s
        bt = b * cfg.reaction_time_s
        veh.nlane = None
        veh.nconn = None
        route, ri = veh.route, veh.ri
        d = lane.length - veh.pos
        if ri + 1 >= len(route):
            return vmax, INF, INF
        vstop = -bt + math.sqrt(bt * bt + 2.0 * b * d) if d > 0 else 0.0
        nxt = route[ri + 1]
        tgt = self._pick_lane(lane, nxt, route[ri + 2] if ri + 2 < len(route) else None)
        if tgt is not None:
            self._settle(tgt, t)
        if vstop >= vmax and d > vmax * dt + 1e-9:
            # cannot reach the line this step and can still stop on a later one,
            # but a tail straddling the far side already limits the approach
            if tgt is not None and tgt.vehs:
                lv = tgt.vehs[-1]
                sp = lv.pos - lv.length - cfg.min_gap_m
                if sp < 0:
                    vs = -bt + math.sqrt(bt * bt + lv.speed * lv.speed + 2.0 * b * max(0.0, d + sp))
                    if vs < vmax:
                        vmax = vs
            return vmax, INF, INF
        if tgt is None:
            return min(vmax, vstop), d / dt, d / dt
        conn = lane.conns[(nxt, tgt.index)]
        veh.nconn = conn
        ok = self._admitted(veh, conn, t)
        if not ok and vstop < v - b * dt - 1e-9 and conn.ctrl != "all_way_stop":
            ok = True  # cannot stop in time: proceed
        if not ok:
            return min(vmax, vstop), d / dt, d / dt
        vnext = veh.factor * tgt.edge.limit
        if vnext < veh.desired:
            va = -bt + math.sqrt(bt * bt + vnext * vnext + 2.0 * b * d)
            if va < vmax:
                vmax = va
        final = ri + 2 >= len(route)
        if tgt.vehs:
            # a tail still straddling the line keeps its real speed; zeroing it brakes too hard
            lv = tgt.vehs[-1]
            room = d + lv.pos - lv.length
            gap = max(0.0, room - cfg.min_gap_m)
            vl = lv.speed
        else:
            # at most one junction per step; a non-final edge ends at a stop line
            gap = room = d + tgt.length
            vl = 0.0
        if not (final and not tgt.vehs):
            vs = -bt + math.sqrt(bt * bt + vl * vl + 2.0 * b * gap)
            if vs < vmax:
                vmax = vs
        veh.nlane = tgt
        # a tail overhanging the line sits on another approach, so stopping short of the line is contact free
        return vmax, gap / dt, max(d, room) / dt

    # -- movement ------------------------------------------------------------------

    def _move(self, t: float) -> None:
        n = len(self.running)
        self._rnd = self.rng.random(n).tolist() if n else []
        self._k = 0
        self._busy: set = set()
        arrived: List[Vehicle] = []
        self._arrived = arrived
        t_end = t + self.cfg.step_s
        for lane in self.move_order:
            self._move_lane(lane, t)
        for veh in arrived:
            self._finish(veh, t_end)
        if arrived:
            gone = set(id(v) for v in arrived)
            self.running = [v for v in self.running if id(v) not in gone]

    def _settle(self, lane: _Lane, t: float) -> None:
        """Move ``lane`` now if its tail has not moved yet this step, so followers see it."""
        if lane.vehs and lane.vehs[-1].moved != self.step_no and lane.key not in self._busy:
            self._move_lane(lane, t)

    def _move_lane(self, lane: _Lane, t: float) -> None:
        vehs = lane.vehs
        if not vehs or lane.key in self._busy:
            return
        self._busy.add(lane.key)
        cfg = self.cfg
        dt = cfg.step_s
        a, b, tau = cfg.accel, cfg.decel, cfg.reaction_time_s
        bt = b * tau
        mg = cfg.min_gap_m
        sq = math.sqrt
        adaw = a * cfg.sigma_dawdle * dt
        stamp = self.step_no
        t_end = t + dt
        rnd = self._rnd
        n = len(rnd)
        arrived = self._arrived
        edge = lane.edge
        L = lane.length
        i = 0
        leader = None
        while i < len(vehs):
            veh = vehs[i]
            if veh.moved == stamp:
                leader = veh
                i += 1
                continue
            veh.moved = stamp
            v = veh.speed
            pos = veh.pos
            desired = veh.desired
            vmax = v + a * dt
            if vmax > desired:
                vmax = desired
            cap = hard = INF
            if leader is not None:
                gap = leader.pos - leader.length - mg - pos
                hard = (gap + mg) / dt
                if gap <= 0:
                    vs = 0.0
                    cap = 0.0
                else:
                    vl = leader.speed
                    vs = -bt + sq(bt * bt + vl * vl + 2.0 * b * gap)
                    cap = gap / dt
                if vs < vmax:
                    vmax = vs
                veh.nconn = veh.nlane = None
            else:
                vmax, cap, hard = self._head_limits(veh, lane, v, vmax, t)
            vn = vmax if vmax > 0 else 0.0
            # dawdle, never below max(0, v - b*dt) unless braking already demanded it
            k = self._k
            r = rnd[k] if k < n else 0.5
            self._k = k + 1
            vd = vn - r * adaw
            floor = v - b * dt
            if floor > vn:
                floor = vn
            if vd < floor:
                vd = floor
            if vd < 0:
                vd = 0.0
            if vd > cap:
                vd = cap if cap > 0 else 0.0
            # after a cut-in, eat into min_gap rather than brake harder than b;
            # only actual contact is ruled out
            lo = v - b * dt
            if lo > hard:
                lo = hard
            if vd < lo:
                vd = lo
            vn = vd
            npos = pos + vn * dt
            if npos > L and veh.ri + 1 < len(veh.route):
                tgt = veh.nlane
                if tgt is None:
                    npos = L
                else:
                    # cross the junction into the chosen lane
                    vehs.pop(i)
                    edge.n_occ -= 1
                    if veh.enter_t is not None:
                        edge.comp_sum += t_end - veh.enter_t
                        edge.comp_n += 1
                    ne = tgt.edge
                    veh.edge = ne
                    veh.lane = tgt
                    veh.ri += 1
                    veh.pos = npos - L
                    veh.speed = vn
                    veh.desired = veh.factor * ne.limit
                    veh.enter_t = t_end
                    veh.wait = 0.0
                    veh.stopped_at = None
                    veh.nconn = veh.nlane = None
                    tgt.vehs.append(veh)
                    ne.n_occ += 1
                    leader = None
                    continue
            if npos >= L and veh.ri + 1 >= len(veh.route):
                vehs.pop(i)
                edge.n_occ -= 1
                if veh.enter_t is not None:
                    edge.comp_sum += t_end - veh.enter_t
                    edge.comp_n += 1
                veh.speed = vn
                veh.pos = L
                arrived.append(veh)
                leader = None
                continue
            veh.pos = npos
            veh.speed = vn
            leader = veh
            i += 1
        self._busy.discard(lane.key)

    def _wait_and_teleport(self, t_end: float) -> None:
        cfg = self.cfg
        thr = cfg.teleport_threshold_s
        dt = cfg.step_s
        wait_by_edge = self.out.wait_by_edge
        tele = []
        for lane in self.lane_order:
            vehs = lane.vehs
            if not vehs:
                continue
            for j, veh in enumerate(vehs):
                if veh.speed < STOP_SPEED:
                    wait_by_edge[lane.edge.id] = wait_by_edge.get(lane.edge.id, 0.0) + dt
                    if j == 0 and veh.stopped_at is None and lane.length - veh.pos < 1.0:
                        veh.stopped_at = t_end
                if j == 0 and veh.speed < STOP_SPEED:
                    veh.wait += dt
                    if veh.wait > thr:
                        tele.append(veh)
                else:
                    veh.wait = 0.0
        for veh in tele:
            lane = veh.lane
            lane.vehs.remove(veh)
            lane.edge.n_occ -= 1
            self.out.teleport_events.append((t_end, veh.id, lane.edge.id, veh.wait))
            self.n_teleports += 1
            veh.teleports += 1
            veh.state = "teleporting"
            veh.ri += 1
            veh.wait = 0.0
            veh.speed = 0.0
            veh.lane = None
            veh.enter_t = None
            self.limbo.append(veh)

    def _record(self, t_end: float) -> None:
        cfg = self.cfg
        tr = self.out.trajectories if cfg.record_trajectories else None
        cells = self.out.speed_cells if cfg.speed_map_bin_s else None
        if tr is not None or cells is not None:
            binno = int(t_end // cfg.speed_map_bin_s) if cells is not None else 0
            for lane in self.lane_order:
                if not lane.vehs:
                    continue
                eid = lane.edge.id
                for veh in lane.vehs:
                    if tr is not None:
                        tr["t"].append(t_end)
                        tr["id"].append(veh.id)
                        tr["edge"].append(eid)
                        tr["lane"].append(lane.index)
                        tr["pos"].append(veh.pos)
                        tr["speed"].append(veh.speed)
                    if cells is not None:
                        c = cells.get((eid, binno))
                        if c is None:
                            cells[(eid, binno)] = [veh.speed, 1]
                        else:
                            c[0] += veh.speed
                            c[1] += 1
        running = len(self.running) - 0
        self.out.summary.append((t_end, self.n_loaded, self.n_inserted, running,
                                 self.n_finished, self.n_teleports, self.n_stranded))

    def _refresh_tt(self) -> None:
        t = self.t + self.cfg.step_s
        longest: Dict[str, float] = {}
        for veh in self.running:
            if veh.state == "running" and veh.enter_t is not None:
                el = t - veh.enter_t
                eid = veh.edge.id
                if el > longest.get(eid, 0.0):
                    longest[eid] = el
        for eid in sorted(self.edges):
            e = self.edges[eid]
            if e.comp_n:
                self.tt.record(eid, e.comp_sum / e.comp_n)
            elif e.n_occ == 0:
                self.tt.record(eid, e.free)
            elif eid in longest:
                # occupied but nobody finished: the longest stay is a lower bound
                self.tt.record(eid, max(e.free, longest[eid]))
            e.comp_sum = 0.0
            e.comp_n = 0

    def _check(self, t_end: float) -> None:
        for lane in self.lane_order:
            vehs = lane.vehs
            for j, veh in enumerate(vehs):
                if not (-1e-9 <= veh.pos <= lane.length + 1e-9):
                    raise EngineError(f"{veh.id} outside edge {lane.edge.id}: pos {veh.pos}")
                if veh.speed < 0 or veh.speed > veh.desired + 1e-9:
                    raise EngineError(f"{veh.id} speed {veh.speed} outside [0, {veh.desired}]")
                if j > 0:
                    ld = vehs[j - 1]
                    if ld.pos - ld.length - veh.pos < -1e-9:
                        raise EngineError(f"collision on {lane.key} at t={t_end}: "
                                          f"{ld.id}@{ld.pos} vs {veh.id}@{veh.pos}")
        row = self.out.summary[-1]
        _, loaded, inserted, running, finished, _, stranded = row
        if inserted != running + finished + stranded:
            raise EngineError(f"conservation broken at t={t_end}: {row}")

    def step(self) -> None:
        cfg = self.cfg
        t = self.t
        self._update_closures(t)
        self._insert(t)
        self._lane_changes(t)
        self._move(t)
        t_end = t + cfg.step_s
        self._wait_and_teleport(t_end)
        self.running = [v for v in self.running if v.state in ("running", "teleporting")]
        self._record(t_end)
        if cfg.check_invariants:
            self._check(t_end)
        if _tick(t_end, cfg.tt_refresh_period_s):
            self._refresh_tt()
        if cfg.reroute_phase == "per_vehicle":
            for veh in self.running:
                if veh.mode == "dynamic" and veh.state == "running" and \
                        _tick(t_end - self.records[veh.id].insert_s, cfg.reroute_period_s):
                    self._reroute(veh)
        elif _tick(t_end, cfg.reroute_period_s):
            for veh in self.running:
                if veh.mode == "dynamic" and veh.state == "running":
                    self._reroute(veh)
        self.t = t_end
        self.step_no += 1

    @property
    def done(self) -> bool:
        return (self.next_trip >= len(self.trips) and not self.queues and not self.running
                and not self.limbo)

    def finalize(self) -> SimOutputs:
        out = self.out
        out.end_time_s = self.t
        out.incomplete = not self.done
        recs = []
        for trip in sorted(self.trips, key=lambda tr: tr.vehicle_id):
            rec = self.records.get(trip.vehicle_id)
            if rec is None:
                rec = TripRecord(trip.vehicle_id, trip.depart_s, None, "pending")
            recs.append(rec)
        out.trips = sorted(recs, key=lambda r: (r.depart_s, r.vehicle_id))
        return out


def _tick(t: float, period: float) -> bool:
    q = t / period
    return abs(q - round(q)) < 1e-9


def run(net: RoadNetwork, demand: DemandSet, closures: Iterable = (),
        config: Optional[SimConfig] = None) -> SimOutputs:
    """Simulate until every trip is finished or stranded, or ``max_time_s``.

    Reaching the time cap with vehicles still pending or running returns the
    outputs with ``incomplete`` set.
    """
    world = World(net, demand, closures, config)
    cfg = world.cfg
    while not world.done and world.t < cfg.max_time_s:
        world.step()
    if world.done is False:
        log.warning("max_time %.0f s reached with %d vehicles unfinished", cfg.max_time_s,
                    len(world.running) + sum(len(q) for q in world.queues.values()))
    return world.finalize()
