"""Programmatic fixture networks: small test topologies and a four-corridor town."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .network import (TAZ, Connection, Edge, Lane, Node, Phase, RoadNetwork, SignalProgram)
from .policy import (ForbidLaneChange, PolicyScript, RemoveSignal, ReverseEdge)


class NetBuilder:
    """Small helper for assembling networks in code."""

    def __init__(self):
        self.nodes: Dict[str, Node] = {}
        self.edges: Dict[str, Edge] = {}
        self.conns: List[Connection] = []
        self.signals: Dict[str, SignalProgram] = {}
        self.tazs: Dict[str, TAZ] = {}

    def node(self, nid: str, x: float, y: float, control: str = "none") -> "NetBuilder":
        self.nodes[nid] = Node(nid, float(x), float(y), control)
        return self

    def edge(self, eid: str, a: str, b: str, length: Optional[float] = None, lanes: int = 1,
             road_type: str = "residential", priority: int = 1, speed: float = 13.89,
             lane_change: bool = True) -> "NetBuilder":
        if length is None:
            na, nb = self.nodes[a], self.nodes[b]
            length = ((na.x - nb.x) ** 2 + (na.y - nb.y) ** 2) ** 0.5
        self.edges[eid] = Edge(eid, a, b, float(length), tuple(Lane(i) for i in range(lanes)),
                               road_type, priority, speed, lane_change)
        return self

    def connect(self, a: str, b: str, pairs: Optional[Sequence[Tuple[int, int]]] = None,
                yield_: bool = False) -> "NetBuilder":
        """Connect edge ``a`` to ``b``; default pairs lane i to min(i, lanes_b - 1)."""
        if pairs is None:
            na, nb = self.edges[a].num_lanes, self.edges[b].num_lanes
            pairs = [(i, min(i, nb - 1)) for i in range(na)]
            pairs += [(na - 1, j) for j in range(na, nb)]
        for i, j in pairs:
            self.conns.append(Connection(a, i, b, j, yield_))
        return self

    def signal(self, sid: str, node: str, phases: Sequence[Tuple[int, Iterable[str]]]) -> "NetBuilder":
        self.signals[sid] = SignalProgram(sid, node, tuple(Phase(d, frozenset(g)) for d, g in phases))
        n = self.nodes[node]
        self.nodes[node] = Node(n.id, n.x, n.y, "traffic_light", sid)
        return self

    def taz(self, tid: str, edges: Sequence[str]) -> "NetBuilder":
        self.tazs[tid] = TAZ(tid, tuple(edges))
        return self

    def build(self) -> RoadNetwork:
        return RoadNetwork(dict(self.nodes), dict(self.edges), tuple(self.conns),
                           dict(self.signals), dict(self.tazs))


def minimal_network(length: float = 100.0, speed: float = 13.89) -> RoadNetwork:
    return NetBuilder().node("A", 0, 0).node("B", length, 0).edge("e0", "A", "B", length,
                                                                  speed=speed).build()


def diamond_network(upper=(100.0, 100.0), lower=(150.0, 40.0)) -> RoadNetwork:
    """Origin ``o`` splits into branches ``a1-a2`` and ``b1-b2`` that rejoin at exit ``d``."""
    b = NetBuilder()
    b.node("S", -100, 0).node("X", 0, 0).node("P", 100, 50).node("Q", 100, -50)
    b.node("Z", 200, 0).node("T", 300, 0)
    b.edge("o", "S", "X", 100).edge("a1", "X", "P", upper[0]).edge("a2", "P", "Z", upper[1])
    b.edge("b1", "X", "Q", lower[0]).edge("b2", "Q", "Z", lower[1])
    b.edge("d", "Z", "T", 100, road_type="highway")
    for x, y in (("o", "a1"), ("o", "b1"), ("a1", "a2"), ("b1", "b2"), ("a2", "d"), ("b2", "d")):
        b.connect(x, y)
    b.taz("exit", ["d"])
    return b.build()


def corridor_network(n_feeders: int = 8, feeder_len: float = 800.0, trunk_len: float = 400.0,
                     trunk_segments: int = 3, exit_len: float = 200.0, bypass_len: float = 900.0,
                     signal_green: int = 6, signal_cycle: int = 60) -> RoadNetwork:
    """Residential feeders draining through a signalized two-lane trunk or a longer bypass.

    Outbound ``out_k`` runs from the town node ``T0`` to ``Tn``; the unused
    two-lane inbound twin ``in_k`` runs back and turns around at ``T0``. The
    one-lane bypass ``by_0``/``by_1`` goes around through node ``B``. The exit
    edge ``exit`` (4 lanes) is the only member of TAZ ``exits``. A signal at
    ``T1`` with an all-red remainder stands in for cross traffic.
    """
    b = NetBuilder()
    for k in range(trunk_segments + 1):
        b.node(f"T{k}", k * trunk_len, 0)
    n = trunk_segments
    b.node("X", n * trunk_len + exit_len, 0)
    b.node("B", n * trunk_len / 2, -bypass_len / 2)
    for k in range(n):
        b.edge(f"out_{k}", f"T{k}", f"T{k + 1}", trunk_len, lanes=2, road_type="arterial",
               priority=3, speed=15.6)
        b.edge(f"in_{k}", f"T{k + 1}", f"T{k}", trunk_len, lanes=2, road_type="arterial",
               priority=3, speed=15.6)
    b.edge("by_0", "T0", "B", bypass_len, speed=11.18)
    b.edge("by_1", "B", f"T{n}", bypass_len, speed=11.18)
    b.edge("exit", f"T{n}", "X", exit_len, lanes=4, road_type="highway", priority=5, speed=25.0)
    for k in range(n - 1):
        b.connect(f"out_{k}", f"out_{k + 1}")
        b.connect(f"in_{k + 1}", f"in_{k}")
    b.connect(f"out_{n - 1}", "exit", [(0, 0), (1, 1)])
    b.connect("by_0", "by_1")
    b.connect("by_1", "exit", [(0, 3)])
    b.connect("in_0", "out_0")
    for j in range(n_feeders):
        b.node(f"F{j}", -50.0 * (j + 1), feeder_len)
        b.edge(f"feed_{j}", f"F{j}", "T0", feeder_len)
        b.connect(f"feed_{j}", "out_0", [(0, 0), (0, 1)])
        b.connect(f"feed_{j}", "by_0")
    if n > 1:
        green = [f"out_0_{i}>out_1_{i}" for i in range(2)] + [f"in_1_{i}>in_0_{i}" for i in range(2)]
        b.signal("sigT", "T1", [(signal_green, green), (signal_cycle - signal_green, [])])
    b.taz("exits", ["exit"])
    return b.build()


def corridor_contraflow_script(net: RoadNetwork, trunk_segments: int = 3) -> PolicyScript:
    """Remove the trunk signal and reverse the inbound twin so four trunk lanes flow outbound."""
    n = trunk_segments
    edits = []
    if "sigT" in net.signals:
        edits.append(RemoveSignal(net.signals["sigT"].node))
    for k in reversed(range(n)):
        if k == n - 1:
            remap = [Connection(f"in_{k}", 0, "exit", 2), Connection(f"in_{k}", 1, "exit", 3)]
        else:
            remap = [Connection(f"in_{k}", i, f"in_{k + 1}", i) for i in range(2)]
        if k == 0:
            feeders = sorted(e for e in net.edges if e.startswith("feed_"))
            remap += [Connection(f, 0, "in_0", i) for f in feeders for i in range(2)]
        edits.append(ReverseEdge(f"in_{k}", tuple(remap)))
    return PolicyScript(tuple(edits), "corridor_contraflow")


def merge_network(main_len: float = 300.0, minor_len: float = 200.0, out_len: float = 300.0,
                  blocked: bool = False) -> RoadNetwork:
    """Two-lane main road and a one-lane minor road merging into a two-lane outbound road.

    The minor road enters outbound lane 0 and yields; with ``blocked`` the
    main road's lane 0 is already closed at the junction.
    """
    b = NetBuilder()
    b.node("M", -main_len, 0).node("J", 0, 0).node("N", 0, -minor_len).node("O", out_len, 0)
    b.edge("main", "M", "J", main_len, lanes=2, road_type="arterial", priority=3)
    b.edge("minor", "N", "J", minor_len, road_type="residential", priority=1)
    b.edge("out", "J", "O", out_len, lanes=2, road_type="highway", priority=3)
    b.connect("main", "out", [(0, 0), (1, 1)])
    b.connect("minor", "out", [(0, 0)], yield_=True)
    b.taz("exits", ["out"])
    net = b.build()
    if blocked:
        from .policy import block_lane_at_junction
        net = block_lane_at_junction(net, "main", 0)
    return net


def crossroad_network(arm: float = 200.0, green: int = 30) -> RoadNetwork:
    """Four-arm crossroad at ``C`` with a two-phase signal (east-west, then north-south)."""
    b = NetBuilder()
    b.node("C", 0, 0)
    pts = {"W": (-arm, 0), "E": (arm, 0), "S": (0, -arm), "N": (0, arm)}
    for k, (x, y) in pts.items():
        b.node(k, x, y)
        b.edge(f"{k}_in", k, "C", arm)
        b.edge(f"{k}_out", "C", k, arm, road_type="highway")
    opposite = {"W": "E", "E": "W", "S": "N", "N": "S"}
    for k in pts:
        b.connect(f"{k}_in", f"{opposite[k]}_out")
    net_conns = {k: f"{k}_in_0>{opposite[k]}_out_0" for k in pts}
    b.signal("sigC", "C", [(green, [net_conns["W"], net_conns["E"]]),
                           (green, [net_conns["S"], net_conns["N"]])])
    b.taz("exits", [f"{k}_out" for k in pts])
    return b.build()


# -- four-corridor town ----------------------------------------------------------

@dataclass
class CitySpec:
    """Layout of the synthetic town.

    Args:
        grid: nodes per side of the residential grid.
        spacing: block length in meters.
        corridors: name -> (grid node (i, j), unit direction, segment lengths).
        n_service: service spurs attached to interior grid nodes.
        signal_green: default seconds of green per cycle at each corridor signal.
        signal_cycle: cycle length in seconds; the rest is all-red (abstracted cross traffic).
        green_by_corridor: per-corridor green overrides, e.g. a busy cross street.
    """

    grid: int = 11
    spacing: float = 250.0
    corridors: Dict[str, Tuple[Tuple[int, int], Tuple[int, int], Tuple[float, ...]]] = field(
        default_factory=lambda: {
            "N": ((5, 10), (0, 1), (300.0, 300.0)),
            "S": ((5, 0), (0, -1), (600.0, 600.0, 600.0)),
            "E": ((10, 5), (1, 0), (500.0, 500.0)),
            "W": ((0, 5), (-1, 0), (500.0, 500.0)),
        })
    n_service: int = 20
    service_len: float = 100.0
    residential_speed: float = 11.18
    arterial_speed: float = 15.6
    exit_len: float = 300.0
    signal_green: int = 20
    signal_cycle: int = 60
    # the north corridor crosses a busy street, so shortest-path routing overloads it
    green_by_corridor: Dict[str, int] = field(default_factory=lambda: {"N": 8})


def _g(i: int, j: int) -> str:
    return f"g{i}_{j}"


def city_network(spec: Optional[CitySpec] = None) -> RoadNetwork:
    """Residential grid drained by four single-lane arterial corridors to exits.

    Each corridor ``c`` has outbound segments ``ao_c_k``, an unused inbound
    twin ``ai_c_k``, a signal at its first interior node, and a two-lane exit
    edge ``x_c`` (TAZ ``exits``). The inbound twin starts at ``xi_c``.
    """
    s = spec or CitySpec()
    b = NetBuilder()
    n, sp = s.grid, s.spacing
    for i in range(n):
        for j in range(n):
            b.node(_g(i, j), i * sp, j * sp)
    nbrs = {}
    for i in range(n):
        for j in range(n):
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                k, l = i + di, j + dj
                if 0 <= k < n and 0 <= l < n:
                    b.edge(f"r_{i}_{j}_{k}_{l}", _g(i, j), _g(k, l), sp,
                           speed=s.residential_speed)
                    nbrs.setdefault((i, j), []).append((k, l))
    out_edges: Dict[str, List[str]] = {}
    in_edges: Dict[str, List[str]] = {}
    for (i, j), ns in nbrs.items():
        for (k, l) in ns:
            eid = f"r_{i}_{j}_{k}_{l}"
            out_edges.setdefault(_g(i, j), []).append(eid)
            in_edges.setdefault(_g(k, l), []).append(eid)

    # grid turning movements, no U-turns
    for node, ins in in_edges.items():
        for e_in in ins:
            src = b.edges[e_in].from_node
            for e_out in out_edges[node]:
                if b.edges[e_out].to_node != src:
                    b.connect(e_in, e_out)

    exits = []
    for name in sorted(s.corridors):
        (gi, gj), (dx, dy), segs = s.corridors[name]
        base = _g(gi, gj)
        x0, y0 = gi * sp, gj * sp
        pts = [base]
        dist = 0.0
        for k, seg in enumerate(segs):
            dist += seg
            nid = f"c{name}{k + 1}"
            b.node(nid, x0 + dx * dist, y0 + dy * dist)
            pts.append(nid)
        far = f"f{name}"
        b.node(far, x0 + dx * (dist + s.exit_len), y0 + dy * (dist + s.exit_len))
        for k, seg in enumerate(segs):
            b.edge(f"ao_{name}_{k}", pts[k], pts[k + 1], seg, road_type="arterial", priority=3,
                   speed=s.arterial_speed)
            b.edge(f"ai_{name}_{k}", pts[k + 1], pts[k], seg, road_type="arterial", priority=3,
                   speed=s.arterial_speed)
        last = len(segs) - 1
        b.edge(f"x_{name}", pts[-1], far, s.exit_len, lanes=2, road_type="highway", priority=5,
               speed=25.0, lane_change=True)
        b.edge(f"xi_{name}", far, pts[-1], s.exit_len, road_type="highway", priority=5,
               speed=25.0)
        exits.append(f"x_{name}")
        for k in range(last):
            b.connect(f"ao_{name}_{k}", f"ao_{name}_{k + 1}")
            b.connect(f"ai_{name}_{k + 1}", f"ai_{name}_{k}")
        b.connect(f"ao_{name}_{last}", f"x_{name}", [(0, 0)])
        b.connect(f"xi_{name}", f"ai_{name}_{last}")
        for e_in in in_edges[base]:
            b.connect(e_in, f"ao_{name}_0")
        for e_out in out_edges[base]:
            b.connect(f"ai_{name}_0", e_out)
        # signal at the first interior corridor node; the red phase stands in for cross traffic
        mid = pts[1]
        if len(segs) > 1:
            green = [f"ao_{name}_0_0>ao_{name}_1_0", f"ai_{name}_1_0>ai_{name}_0_0"]
            g = s.green_by_corridor.get(name, s.signal_green)
            if not 0 < g < s.signal_cycle:
                raise ValueError(f"green {g} must lie inside the {s.signal_cycle} s cycle")
            b.signal(f"sig{name}", mid, [(g, green), (s.signal_cycle - g, [])])

    # service spurs at interior grid nodes, spread deterministically
    interior = [(i, j) for i in range(1, n - 1) for j in range(1, n - 1)]
    step = max(1, len(interior) // max(1, s.n_service))
    for k in range(s.n_service):
        i, j = interior[(k * step + step // 2) % len(interior)]
        nid = f"sp{k}"
        b.node(nid, i * sp + 30.0, j * sp + s.service_len)
        eid = f"s_{k}"
        b.edge(eid, nid, _g(i, j), s.service_len, road_type="service", speed=8.0)
        for e_out in out_edges[_g(i, j)]:
            b.connect(eid, e_out)
    b.taz("exits", exits)
    return b.build()


def city_contraflow_script(net: RoadNetwork, spec: Optional[CitySpec] = None) -> PolicyScript:
    """Contraflow on every corridor: reverse the inbound twin into a second exit,
    remove the corridor signals, and forbid lane changes on the exit edges."""
    s = spec or CitySpec()
    edits = []
    for name in sorted(s.corridors):
        (gi, gj), _, segs = s.corridors[name]
        base = _g(gi, gj)
        if f"sig{name}" in net.signals:
            edits.append(RemoveSignal(net.signals[f"sig{name}"].node))
        edits.append(ReverseEdge(f"xi_{name}", (), "exits"))
        last = len(segs) - 1
        for k in reversed(range(len(segs))):
            if k == last:
                remap = [Connection(f"ai_{name}_{k}", 0, f"xi_{name}", 0)]
            else:
                remap = [Connection(f"ai_{name}_{k}", 0, f"ai_{name}_{k + 1}", 0)]
            if k == 0:
                remap += [Connection(e, 0, f"ai_{name}_0", 0) for e in net.node_in_edges(base)
                          if e.startswith("r_")]
            edits.append(ReverseEdge(f"ai_{name}_{k}", tuple(remap)))
        edits.append(ForbidLaneChange(f"x_{name}"))
    return PolicyScript(tuple(edits), "city_contraflow")
