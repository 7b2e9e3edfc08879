"""Road network model, JSON network files, map checks and graph queries."""

from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

ROAD_TYPES = ("residential", "service", "arterial", "highway", "footpath")
ORIGIN_TYPES = ("residential", "service")
CONTROLS = ("none", "traffic_light", "all_way_stop")

MIN_EDGE_LENGTH = 1.0


class NetworkError(ValueError):
    """Base class for network file problems."""


class NetworkSyntaxError(NetworkError):
    """Malformed network text (bad JSON or wrong shape)."""

    def __init__(self, message: str, line: int = 0, column: int = 0):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class NetworkSemanticError(NetworkError):
    """Well-formed file whose contents break a network invariant."""

    def __init__(self, message: str, ref: str = ""):
        super().__init__(message)
        self.ref = ref


@dataclass(frozen=True)
class Node:
    id: str
    x: float
    y: float
    control: str = "none"
    program_id: Optional[str] = None


@dataclass(frozen=True)
class Lane:
    index: int
    blocked_at_junction: bool = False


@dataclass(frozen=True)
class Edge:
    id: str
    from_node: str
    to_node: str
    length: float
    lanes: Tuple[Lane, ...]
    road_type: str = "residential"
    priority: int = 1
    speed_limit: float = 13.89
    lane_change_allowed: bool = True
    loop: bool = False

    @property
    def num_lanes(self) -> int:
        return len(self.lanes)

    @property
    def free_flow_time(self) -> float:
        return self.length / self.speed_limit


@dataclass(frozen=True)
class Connection:
    from_edge: str
    from_lane: int
    to_edge: str
    to_lane: int
    yield_required: bool = False
    explicit_id: Optional[str] = None

    @property
    def id(self) -> str:
        if self.explicit_id is not None:
            return self.explicit_id
        return f"{self.from_edge}_{self.from_lane}>{self.to_edge}_{self.to_lane}"


@dataclass(frozen=True)
class Phase:
    duration: int
    green: frozenset


@dataclass(frozen=True)
class SignalProgram:
    id: str
    node: str
    phases: Tuple[Phase, ...]

    @property
    def cycle(self) -> int:
        return sum(p.duration for p in self.phases)

    def phase_at(self, t: float) -> Phase:
        """Phase active at simulation time ``t`` (cycle starts at t = 0)."""
        r = t % self.cycle
        for phase in self.phases:
            if r < phase.duration:
                return phase
            r -= phase.duration
        return self.phases[-1]


@dataclass(frozen=True)
class TAZ:
    id: str
    edges: Tuple[str, ...]


@dataclass(frozen=True)
class RoadNetwork:
    """Immutable road network; adjacency indexes are derived on construction.

    Policy edits build a new network with ``dataclasses.replace`` (or
    ``with_changes``) so the indexes are always rebuilt.
    """

    nodes: Dict[str, Node]
    edges: Dict[str, Edge]
    connections: Tuple[Connection, ...]
    signals: Dict[str, SignalProgram] = field(default_factory=dict)
    tazs: Dict[str, TAZ] = field(default_factory=dict)

    _out: Dict[str, Tuple[Connection, ...]] = field(init=False, repr=False, compare=False)
    _in: Dict[str, Tuple[Connection, ...]] = field(init=False, repr=False, compare=False)
    _succ: Dict[str, Tuple[str, ...]] = field(init=False, repr=False, compare=False)
    _pred: Dict[str, Tuple[str, ...]] = field(init=False, repr=False, compare=False)
    _node_out: Dict[str, Tuple[str, ...]] = field(init=False, repr=False, compare=False)
    _node_in: Dict[str, Tuple[str, ...]] = field(init=False, repr=False, compare=False)
    _conn_by_id: Dict[str, Connection] = field(init=False, repr=False, compare=False)
    _taz_members: frozenset = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        out: Dict[str, list] = {e: [] for e in self.edges}
        inc: Dict[str, list] = {e: [] for e in self.edges}
        for c in self.connections:
            if not self.lane_valid(c):
                continue
            out[c.from_edge].append(c)
            inc[c.to_edge].append(c)
        node_out: Dict[str, list] = {n: [] for n in self.nodes}
        node_in: Dict[str, list] = {n: [] for n in self.nodes}
        for e in self.edges.values():
            node_out[e.from_node].append(e.id)
            node_in[e.to_node].append(e.id)
        set_ = object.__setattr__
        set_(self, "_out", {k: tuple(v) for k, v in out.items()})
        set_(self, "_in", {k: tuple(v) for k, v in inc.items()})
        set_(self, "_succ", {k: tuple(sorted({c.to_edge for c in v})) for k, v in out.items()})
        set_(self, "_pred", {k: tuple(sorted({c.from_edge for c in v})) for k, v in inc.items()})
        set_(self, "_node_out", {k: tuple(v) for k, v in node_out.items()})
        set_(self, "_node_in", {k: tuple(v) for k, v in node_in.items()})
        set_(self, "_conn_by_id", {c.id: c for c in self.connections})
        set_(self, "_taz_members", frozenset(e for t in self.tazs.values() for e in t.edges))

    # -- queries -----------------------------------------------------------

    def lane_valid(self, c: Connection) -> bool:
        fe, te = self.edges.get(c.from_edge), self.edges.get(c.to_edge)
        return (fe is not None and te is not None
                and 0 <= c.from_lane < fe.num_lanes and 0 <= c.to_lane < te.num_lanes)

    def out_connections(self, edge_id: str) -> Tuple[Connection, ...]:
        return self._out[edge_id]

    def in_connections(self, edge_id: str) -> Tuple[Connection, ...]:
        return self._in[edge_id]

    def successors(self, edge_id: str) -> Tuple[str, ...]:
        """Edges reachable from ``edge_id`` through one connection (sorted)."""
        return self._succ[edge_id]

    def predecessors(self, edge_id: str) -> Tuple[str, ...]:
        return self._pred[edge_id]

    def out_degree(self, node_id: str) -> int:
        return len(self._node_out[node_id])

    def in_degree(self, node_id: str) -> int:
        return len(self._node_in[node_id])

    def node_out_edges(self, node_id: str) -> Tuple[str, ...]:
        return self._node_out[node_id]

    def node_in_edges(self, node_id: str) -> Tuple[str, ...]:
        return self._node_in[node_id]

    def connection(self, conn_id: str) -> Optional[Connection]:
        return self._conn_by_id.get(conn_id)

    def is_taz_member(self, edge_id: str) -> bool:
        return edge_id in self._taz_members

    def taz_of(self, edge_id: str) -> List[str]:
        return [t.id for t in self.tazs.values() if edge_id in t.edges]

    def origin_edges(self) -> List[str]:
        return [e.id for e in self.edges.values() if e.road_type in ORIGIN_TYPES]

    def resolve_destination(self, dest: str) -> Tuple[str, ...]:
        """Return the member edges of a TAZ id, or ``(dest,)`` for an edge id."""
        if dest in self.tazs:
            return self.tazs[dest].edges
        if dest in self.edges:
            return (dest,)
        raise KeyError(f"unknown destination {dest!r}")

    def with_changes(self, **changes) -> "RoadNetwork":
        return replace(self, **changes)

    def fingerprint(self) -> str:
        """Order-independent content hash; equal for isomorphic networks."""
        doc = _to_document(self)
        for key in ("nodes", "edges", "signals", "tazs"):
            doc[key] = sorted(doc[key], key=lambda d: d["id"])
        doc["connections"] = sorted(doc["connections"], key=lambda d: json.dumps(d, sort_keys=True))
        blob = json.dumps(doc, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# -- file format -------------------------------------------------------------

_TOP_KEYS = {"nodes", "edges", "connections", "signals", "tazs"}
_NODE_KEYS = {"id", "x", "y", "control"}
_EDGE_KEYS = {"id", "from", "to", "length_m", "lanes", "type", "priority",
              "speed_limit_mps", "lane_change", "blocked_lanes", "loop"}
_CONN_KEYS = {"from_edge", "from_lane", "to_edge", "to_lane", "yield", "id"}
_SIGNAL_KEYS = {"id", "node", "phases"}
_PHASE_KEYS = {"dur_s", "green"}
_TAZ_KEYS = {"id", "edges"}


def _locate(text: str, needle: str) -> Tuple[int, int]:
    idx = text.find(needle)
    if idx < 0:
        return 0, 0
    line = text.count("\n", 0, idx) + 1
    col = idx - (text.rfind("\n", 0, idx) + 1) + 1
    return line, col


def _check_keys(text: str, obj, allowed: set, required: Iterable[str], what: str):
    if not isinstance(obj, dict):
        raise NetworkSyntaxError(f"{what} must be an object", 0, 0)
    for key in obj:
        if key not in allowed:
            raise NetworkSyntaxError(f"unknown key {key!r} in {what}", *_locate(text, f'"{key}"'))
    for key in required:
        if key not in obj:
            raise NetworkSyntaxError(f"missing key {key!r} in {what}", 0, 0)


def _num(value, what: str, text: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise NetworkSyntaxError(f"{what} must be a number", *_locate(text, str(value)))
    return float(value)


def parse_network(text: str) -> RoadNetwork:
    """Parse network JSON text into an indexed :class:`RoadNetwork`.

    Raises:
        NetworkSyntaxError: malformed JSON, unknown/missing keys, wrong types.
        NetworkSemanticError: dangling references or violated invariants; the
            offending id is in ``.ref`` and in the message.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkSyntaxError(exc.msg, exc.lineno, exc.colno) from None
    _check_keys(text, doc, _TOP_KEYS, ("nodes", "edges"), "network")

    nodes: Dict[str, Node] = {}
    for raw in doc["nodes"]:
        _check_keys(text, raw, _NODE_KEYS, ("id", "x", "y"), "node")
        nid = str(raw["id"])
        if nid in nodes:
            raise NetworkSemanticError(f"duplicate node id {nid!r}", nid)
        x, y = _num(raw["x"], "node x", text), _num(raw["y"], "node y", text)
        if not (math.isfinite(x) and math.isfinite(y)):
            raise NetworkSemanticError(f"node {nid!r} has non-finite position", nid)
        control = raw.get("control", "none")
        if control not in CONTROLS:
            raise NetworkSemanticError(f"node {nid!r}: unknown control {control!r}", nid)
        nodes[nid] = Node(nid, x, y, control)

    edges: Dict[str, Edge] = {}
    for raw in doc["edges"]:
        _check_keys(text, raw, _EDGE_KEYS, ("id", "from", "to", "length_m"), "edge")
        eid = str(raw["id"])
        if eid in edges:
            raise NetworkSemanticError(f"duplicate edge id {eid!r}", eid)
        for end in ("from", "to"):
            if raw[end] not in nodes:
                raise NetworkSemanticError(
                    f"edge {eid!r} references unknown node {raw[end]!r}", str(raw[end]))
        length = _num(raw["length_m"], "length_m", text)
        if not length >= MIN_EDGE_LENGTH:
            raise NetworkSemanticError(f"edge {eid!r} shorter than {MIN_EDGE_LENGTH} m", eid)
        n_lanes = raw.get("lanes", 1)
        if isinstance(n_lanes, bool) or not isinstance(n_lanes, int) or n_lanes < 1:
            raise NetworkSemanticError(f"edge {eid!r} needs at least one lane", eid)
        blocked = set(raw.get("blocked_lanes", []))
        if any(not isinstance(i, int) or not 0 <= i < n_lanes for i in blocked):
            raise NetworkSemanticError(f"edge {eid!r}: blocked lane index out of range", eid)
        road_type = raw.get("type", "residential")
        if road_type not in ROAD_TYPES:
            raise NetworkSemanticError(f"edge {eid!r}: unknown road type {road_type!r}", eid)
        speed = _num(raw.get("speed_limit_mps", 13.89), "speed_limit_mps", text)
        if not speed > 0:
            raise NetworkSemanticError(f"edge {eid!r}: speed limit must be positive", eid)
        loop = bool(raw.get("loop", False))
        if raw["from"] == raw["to"] and not loop:
            raise NetworkSemanticError(f"edge {eid!r} starts and ends at one node", eid)
        priority = raw.get("priority", 1)
        if isinstance(priority, bool) or not isinstance(priority, int):
            raise NetworkSyntaxError(f"edge {eid!r}: priority must be an integer", *_locate(text, eid))
        edges[eid] = Edge(
            id=eid, from_node=raw["from"], to_node=raw["to"], length=length,
            lanes=tuple(Lane(i, i in blocked) for i in range(n_lanes)),
            road_type=road_type, priority=priority, speed_limit=speed,
            lane_change_allowed=bool(raw.get("lane_change", True)), loop=loop)

    connections: List[Connection] = []
    seen_conn = set()
    for raw in doc.get("connections", []):
        _check_keys(text, raw, _CONN_KEYS, ("from_edge", "from_lane", "to_edge", "to_lane"),
                    "connection")
        for key in ("from_edge", "to_edge"):
            if raw[key] not in edges:
                raise NetworkSemanticError(
                    f"connection references unknown edge {raw[key]!r}", str(raw[key]))
        for key in ("from_lane", "to_lane"):
            if isinstance(raw[key], bool) or not isinstance(raw[key], int):
                raise NetworkSyntaxError(f"connection {key} must be an integer", 0, 0)
        fe, te = edges[raw["from_edge"]], edges[raw["to_edge"]]
        if te.from_node != fe.to_node:
            raise NetworkSemanticError(
                f"connection {fe.id!r} -> {te.id!r}: {te.id!r} does not start where "
                f"{fe.id!r} ends", te.id)
        conn = Connection(fe.id, raw["from_lane"], te.id, raw["to_lane"],
                          bool(raw.get("yield", False)), raw.get("id"))
        if conn.id in seen_conn:
            raise NetworkSemanticError(f"duplicate connection {conn.id!r}", conn.id)
        seen_conn.add(conn.id)
        connections.append(conn)

    signals: Dict[str, SignalProgram] = {}
    for raw in doc.get("signals", []):
        _check_keys(text, raw, _SIGNAL_KEYS, ("id", "node", "phases"), "signal")
        sid = str(raw["id"])
        if sid in signals:
            raise NetworkSemanticError(f"duplicate signal id {sid!r}", sid)
        node = nodes.get(raw["node"])
        if node is None:
            raise NetworkSemanticError(f"signal {sid!r} references unknown node {raw['node']!r}",
                                       str(raw["node"]))
        if node.control == "all_way_stop" or node.program_id is not None:
            raise NetworkSemanticError(f"node {node.id!r} cannot take signal {sid!r}", node.id)
        phases = []
        if not raw["phases"]:
            raise NetworkSemanticError(f"signal {sid!r} has no phases", sid)
        for ph in raw["phases"]:
            _check_keys(text, ph, _PHASE_KEYS, ("dur_s", "green"), "phase")
            dur = ph["dur_s"]
            if isinstance(dur, bool) or not isinstance(dur, int) or dur <= 0:
                raise NetworkSemanticError(f"signal {sid!r}: phase durations must be positive "
                                           "integers", sid)
            phases.append(Phase(dur, frozenset(str(g) for g in ph["green"])))
        signals[sid] = SignalProgram(sid, node.id, tuple(phases))
        nodes[node.id] = replace(node, control="traffic_light", program_id=sid)
    for node in nodes.values():
        if node.control == "traffic_light" and node.program_id is None:
            raise NetworkSemanticError(f"node {node.id!r} is signalized but has no program",
                                       node.id)

    tazs: Dict[str, TAZ] = {}
    for raw in doc.get("tazs", []):
        _check_keys(text, raw, _TAZ_KEYS, ("id", "edges"), "taz")
        tid = str(raw["id"])
        if tid in tazs:
            raise NetworkSemanticError(f"duplicate TAZ id {tid!r}", tid)
        if not raw["edges"]:
            raise NetworkSemanticError(f"TAZ {tid!r} has no member edges", tid)
        for e in raw["edges"]:
            if e not in edges:
                raise NetworkSemanticError(f"TAZ {tid!r} references unknown edge {e!r}", str(e))
        tazs[tid] = TAZ(tid, tuple(raw["edges"]))

    return RoadNetwork(nodes, edges, tuple(connections), signals, tazs)


def _to_document(net: RoadNetwork) -> dict:
    nodes = []
    for n in net.nodes.values():
        d = {"id": n.id, "x": n.x, "y": n.y}
        # traffic_light is implied by the signal entry
        if n.control == "all_way_stop":
            d["control"] = n.control
        nodes.append(d)
    edges = []
    for e in net.edges.values():
        d = {"id": e.id, "from": e.from_node, "to": e.to_node, "length_m": e.length,
             "lanes": e.num_lanes, "type": e.road_type, "priority": e.priority,
             "speed_limit_mps": e.speed_limit, "lane_change": e.lane_change_allowed}
        blocked = [ln.index for ln in e.lanes if ln.blocked_at_junction]
        if blocked:
            d["blocked_lanes"] = blocked
        if e.loop:
            d["loop"] = True
        edges.append(d)
    conns = []
    for c in net.connections:
        d = {"from_edge": c.from_edge, "from_lane": c.from_lane, "to_edge": c.to_edge,
             "to_lane": c.to_lane, "yield": c.yield_required}
        if c.explicit_id is not None:
            d["id"] = c.explicit_id
        conns.append(d)
    signals = [{"id": s.id, "node": s.node,
                "phases": [{"dur_s": p.duration, "green": sorted(p.green)} for p in s.phases]}
               for s in net.signals.values()]
    tazs = [{"id": t.id, "edges": list(t.edges)} for t in net.tazs.values()]
    return {"nodes": nodes, "edges": edges, "connections": conns,
            "signals": signals, "tazs": tazs}


def serialize_network(net: RoadNetwork) -> str:
    return json.dumps(_to_document(net), indent=1)


def load_network(path) -> RoadNetwork:
    with open(path, encoding="utf-8") as fh:
        return parse_network(fh.read())


def save_network(net: RoadNetwork, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_network(net))


# -- validation --------------------------------------------------------------

UNREACHABLE_SINK = "unreachable_sink"
DEAD_END = "dead_end"
BAD_LANE_INDEX = "bad_lane_index"
SIGNAL_MISSING_CONNECTION = "signal_missing_connection"
FOOTPATH_CONNECTION = "footpath_connection"
ZERO_OUT_DEGREE_NODE = "zero_out_degree_node"

CATEGORIES = (UNREACHABLE_SINK, DEAD_END, BAD_LANE_INDEX, SIGNAL_MISSING_CONNECTION,
              FOOTPATH_CONNECTION, ZERO_OUT_DEGREE_NODE)


@dataclass(frozen=True)
class Finding:
    category: str
    subject: str
    message: str


@dataclass
class ValidationReport:
    findings: List[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings

    def by_category(self, category: str) -> List[Finding]:
        return [f for f in self.findings if f.category == category]

    def subjects(self, category: str) -> List[str]:
        return [f.subject for f in self.by_category(category)]

    def __str__(self) -> str:
        if self.ok:
            return "no findings"
        return "\n".join(f"[{f.category}] {f.subject}: {f.message}" for f in self.findings)


def _reachable(net: RoadNetwork, sources: Iterable[str]) -> set:
    seen = set()
    queue = deque()
    for s in sources:
        if s not in seen and net.edges[s].road_type != "footpath":
            seen.add(s)
            queue.append(s)
    while queue:
        e = queue.popleft()
        for n in net.successors(e):
            if n not in seen and net.edges[n].road_type != "footpath":
                seen.add(n)
                queue.append(n)
    return seen


def _reachable_to(net: RoadNetwork, sinks: Iterable[str]) -> set:
    """Edges with a connection path to at least one of ``sinks`` (reverse search)."""
    seen = {s for s in sinks if net.edges[s].road_type != "footpath"}
    stack = list(seen)
    while stack:
        e = stack.pop()
        for p in net.predecessors(e):
            if p not in seen and net.edges[p].road_type != "footpath":
                seen.add(p)
                stack.append(p)
    return seen


def validate_network(net: RoadNetwork) -> ValidationReport:
    """Run the map-repair checks and collect findings (never raises)."""
    report = ValidationReport()
    add = report.findings.append

    reach = _reachable(net, net.origin_edges())
    for taz in net.tazs.values():
        for e in taz.edges:
            if e not in reach:
                add(Finding(UNREACHABLE_SINK, e, f"TAZ {taz.id} member not reachable from any origin"))

    for e in net.edges.values():
        if e.road_type == "footpath" or net.is_taz_member(e.id):
            continue
        if not net.out_connections(e.id):
            add(Finding(DEAD_END, e.id, "no outgoing connection and not a TAZ member"))

    for c in net.connections:
        if not net.lane_valid(c):
            add(Finding(BAD_LANE_INDEX, c.id,
                        f"lane {c.from_lane}->{c.to_lane} outside lane range"))
        if "footpath" in (net.edges[c.from_edge].road_type, net.edges[c.to_edge].road_type):
            add(Finding(FOOTPATH_CONNECTION, c.id, "vehicle connection touches a footpath"))

    for sig in net.signals.values():
        for k, ph in enumerate(sig.phases):
            for cid in sorted(ph.green):
                if net.connection(cid) is None:
                    add(Finding(SIGNAL_MISSING_CONNECTION, f"{sig.id}:{k}:{cid}",
                                f"phase {k} greenlights unknown connection {cid}"))

    for node in net.nodes.values():
        incoming = [e for e in net.node_in_edges(node.id)
                    if net.edges[e].road_type != "footpath"]
        if incoming and net.out_degree(node.id) == 0 and \
                not any(net.is_taz_member(e) for e in incoming):
            add(Finding(ZERO_OUT_DEGREE_NODE, node.id, "interior node without outgoing edges"))
    return report


# -- graph queries -----------------------------------------------------------

def route_exists(net: RoadNetwork, from_edge: str, to_edge: str) -> Tuple[bool, List[str]]:
    """Breadth-first search over connections; returns (found, edge path)."""
    for e in (from_edge, to_edge):
        if e not in net.edges:
            raise KeyError(f"unknown edge {e!r}")
    if from_edge == to_edge:
        return True, [from_edge]
    parent = {from_edge: None}
    queue = deque([from_edge])
    while queue:
        e = queue.popleft()
        for n in net.successors(e):
            if n in parent:
                continue
            parent[n] = e
            if n == to_edge:
                path = [n]
                while parent[path[-1]] is not None:
                    path.append(parent[path[-1]])
                return True, path[::-1]
            queue.append(n)
    return False, []


def total_length_by_type(net: RoadNetwork, road_type: str) -> float:
    return sum(e.length for e in net.edges.values() if e.road_type == road_type)


def path_is_connected(net: RoadNetwork, path: Sequence[str]) -> bool:
    """True when every consecutive pair in ``path`` is joined by a connection."""
    return all(b in net.successors(a) for a, b in zip(path, path[1:]))


# -- junction geometry -------------------------------------------------------

LANE_WIDTH = 3.2
_CHORD = 10.0


def _unit(ax: float, ay: float, bx: float, by: float) -> Tuple[float, float]:
    dx, dy = bx - ax, by - ay
    norm = math.hypot(dx, dy)
    if norm == 0:
        return 1.0, 0.0
    return dx / norm, dy / norm


def movement_chord(net: RoadNetwork, c: Connection) -> Tuple[Tuple[float, float], Tuple[float, float]]:
    """Short segment approximating the path of a movement through its node.

    Right-hand traffic: each lane sits to the right of the edge centre line,
    lane 0 outermost.
    """
    fe, te = net.edges[c.from_edge], net.edges[c.to_edge]
    node = net.nodes[fe.to_node]
    a = net.nodes[fe.from_node]
    b = net.nodes[te.to_node]
    ux, uy = _unit(a.x, a.y, node.x, node.y)
    vx, vy = _unit(node.x, node.y, b.x, b.y)
    off_in = (fe.num_lanes - c.from_lane - 0.5) * LANE_WIDTH
    off_out = (te.num_lanes - c.to_lane - 0.5) * LANE_WIDTH
    p = (node.x - ux * _CHORD + uy * off_in, node.y - uy * _CHORD - ux * off_in)
    q = (node.x + vx * _CHORD + vy * off_out, node.y + vy * _CHORD - vx * off_out)
    return p, q


def _orient(p, q, r) -> float:
    return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])


def _segments_cross(p1, p2, q1, q2) -> bool:
    d1, d2 = _orient(q1, q2, p1), _orient(q1, q2, p2)
    d3, d4 = _orient(p1, p2, q1), _orient(p1, p2, q2)
    return d1 * d2 < 0 and d3 * d4 < 0


def movements_conflict(net: RoadNetwork, c1: Connection, c2: Connection) -> bool:
    """Two movements through one node conflict when they merge into the same
    lane or their chords cross. Movements sharing an approach never conflict."""
    if c1.from_edge == c2.from_edge:
        return False
    if (c1.to_edge, c1.to_lane) == (c2.to_edge, c2.to_lane):
        return True
    return _segments_cross(*movement_chord(net, c1), *movement_chord(net, c2))


def node_connections(net: RoadNetwork, node_id: str) -> List[Connection]:
    """Lane-valid connections passing through ``node_id``."""
    return [c for e in net.node_in_edges(node_id) for c in net.out_connections(e)]
