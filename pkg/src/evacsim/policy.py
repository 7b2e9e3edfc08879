"""Contraflow and emergency traffic-rule edits over a :class:`RoadNetwork`.

Every edit is a pure function from network to network; a policy script is an
ordered list of edits applied with :func:`apply_policy`. Timed closures are
not applied to the network itself but handed back for the engine's event
schedule.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple, Union

from .network import (Connection, RoadNetwork, TAZ, _reachable, _reachable_to,
                      movements_conflict, node_connections, path_is_connected)

log = logging.getLogger(__name__)


class PolicyError(ValueError):
    """An edit could not be applied. ``index`` is its position in the script."""

    def __init__(self, reason: str, index: Optional[int] = None):
        prefix = f"edit {index}: " if index is not None else ""
        super().__init__(prefix + reason)
        self.reason = reason
        self.index = index


@dataclass(frozen=True)
class ReverseEdge:
    edge: str
    # connections to add after the reversal, e.g. to wire the reversed edge
    # into an exit; anything touching the old endpoints is dropped otherwise
    remap: Tuple[Connection, ...] = ()
    join_taz: Optional[str] = None


@dataclass(frozen=True)
class BlockLaneAtJunction:
    edge: str
    lane: int


@dataclass(frozen=True)
class RemoveSignal:
    node: str


@dataclass(frozen=True)
class ForbidLaneChange:
    edge: str


@dataclass(frozen=True)
class CloseEdge:
    edge: str
    start_s: float
    end_s: float


PolicyEdit = Union[ReverseEdge, BlockLaneAtJunction, RemoveSignal, ForbidLaneChange, CloseEdge]


@dataclass(frozen=True)
class PolicyScript:
    edits: Tuple[PolicyEdit, ...] = ()
    name: str = "policy"


@dataclass
class ApplicationReport:
    dropped_connections: List[str] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    closures: List[CloseEdge] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "dropped_connections": list(self.dropped_connections),
            "warnings": list(self.warnings),
            "closures": [{"edge": c.edge, "start_s": c.start_s, "end_s": c.end_s}
                         for c in self.closures],
        }


def _reachable_sinks(net: RoadNetwork) -> set:
    reach = _reachable(net, net.origin_edges())
    return {e for taz in net.tazs.values() for e in taz.edges if e in reach}


def _reverse(net: RoadNetwork, edit: ReverseEdge) -> Tuple[RoadNetwork, List[str]]:
    edge = net.edges.get(edit.edge)
    if edge is None:
        raise PolicyError(f"unknown edge {edit.edge!r}")
    before = _reachable_sinks(net)
    flipped = replace(edge, from_node=edge.to_node, to_node=edge.from_node)
    edges = dict(net.edges)
    edges[edge.id] = flipped
    kept, dropped = [], []
    for c in net.connections:
        if edge.id in (c.from_edge, c.to_edge):
            dropped.append(c.id)
        else:
            kept.append(c)
    have = {c.id for c in kept}
    for c in edit.remap:
        for e in (c.from_edge, c.to_edge):
            if e not in edges:
                raise PolicyError(f"remap references unknown edge {e!r}")
        if edges[c.to_edge].from_node != edges[c.from_edge].to_node:
            raise PolicyError(f"remap connection {c.id} is geometrically impossible")
        if c.id not in have:
            kept.append(c)
            have.add(c.id)
    tazs = net.tazs
    if edit.join_taz is not None:
        if edit.join_taz not in tazs:
            raise PolicyError(f"unknown TAZ {edit.join_taz!r}")
        tazs = dict(tazs)
        old = tazs[edit.join_taz]
        if edge.id not in old.edges:
            tazs[old.id] = TAZ(old.id, old.edges + (edge.id,))
    out = replace(net, edges=edges, connections=tuple(kept), tazs=tazs)
    lost = before - _reachable_sinks(out)
    if lost:
        raise PolicyError(f"TAZ unreachable: reversing {edge.id!r} isolates {sorted(lost)}")
    restored = {c.id for c in edit.remap}
    return out, [d for d in dropped if d not in restored]


def reverse_edge(net: RoadNetwork, edge_id: str, remap: Sequence[Connection] = (),
                 join_taz: Optional[str] = None) -> RoadNetwork:
    """Swap the end nodes of ``edge_id``, keeping its length and lanes.

    Connections touching the edge no longer fit its geometry and are dropped
    (logged); ``remap`` supplies replacements.

    Raises:
        PolicyError: unknown edge, or a TAZ member loses its last approach.
    """
    out, dropped = _reverse(net, ReverseEdge(edge_id, tuple(remap), join_taz))
    if dropped:
        log.info("reverse %s dropped %d connections: %s", edge_id, len(dropped), dropped)
    return out


def _block(net: RoadNetwork, edit: BlockLaneAtJunction) -> Tuple[RoadNetwork, List[str]]:
    edge = net.edges.get(edit.edge)
    if edge is None:
        raise PolicyError(f"unknown edge {edit.edge!r}")
    if not 0 <= edit.lane < edge.num_lanes:
        raise PolicyError(f"edge {edge.id!r} has no lane {edit.lane}")
    had_exit = bool(net.out_connections(edge.id))
    kept, dropped = [], []
    for c in net.connections:
        if c.from_edge == edge.id and c.from_lane == edit.lane:
            dropped.append(c.id)
        else:
            kept.append(c)
    lanes = tuple(replace(ln, blocked_at_junction=True) if ln.index == edit.lane else ln
                  for ln in edge.lanes)
    edges = dict(net.edges)
    edges[edge.id] = replace(edge, lanes=lanes)
    out = replace(net, edges=edges, connections=tuple(kept))
    if had_exit and not out.out_connections(edge.id):
        raise PolicyError(f"lane {edit.lane} is the only connected lane of {edge.id!r}")
    return out, dropped


def block_lane_at_junction(net: RoadNetwork, edge_id: str, lane_index: int) -> RoadNetwork:
    """Remove every connection leaving one lane; upstream driving stays legal."""
    return _block(net, BlockLaneAtJunction(edge_id, lane_index))[0]


def priority_yields(net: RoadNetwork, node_id: str) -> RoadNetwork:
    """Recompute yield flags at an unsignalized node from edge priorities.

    A movement yields when it conflicts with a movement from a strictly
    higher-priority approach.
    """
    conns = node_connections(net, node_id)
    ids = {c.id for c in conns}
    flags = {}
    for c in conns:
        mine = net.edges[c.from_edge].priority
        flags[c.id] = any(net.edges[o.from_edge].priority > mine and movements_conflict(net, c, o)
                          for o in conns)
    new = tuple(replace(c, yield_required=flags[c.id]) if c.id in ids else c
                for c in net.connections)
    return replace(net, connections=new)


def remove_signal(net: RoadNetwork, node_id: str) -> RoadNetwork:
    """Turn a signalized node into a priority junction.

    Raises:
        PolicyError: the node is unknown or not signalized.
    """
    node = net.nodes.get(node_id)
    if node is None:
        raise PolicyError(f"unknown node {node_id!r}")
    if node.control != "traffic_light":
        raise PolicyError(f"node {node_id!r} is not signalized")
    nodes = dict(net.nodes)
    nodes[node_id] = replace(node, control="none", program_id=None)
    signals = {k: v for k, v in net.signals.items() if k != node.program_id}
    return priority_yields(replace(net, nodes=nodes, signals=signals), node_id)


def forbid_lane_change(net: RoadNetwork, edge_id: str) -> RoadNetwork:
    edge = net.edges.get(edge_id)
    if edge is None:
        raise PolicyError(f"unknown edge {edge_id!r}")
    edges = dict(net.edges)
    edges[edge_id] = replace(edge, lane_change_allowed=False)
    return replace(net, edges=edges)


def _apply_one(net: RoadNetwork, edit: PolicyEdit, report: ApplicationReport) -> RoadNetwork:
    if isinstance(edit, ReverseEdge):
        net, dropped = _reverse(net, edit)
        report.dropped_connections.extend(dropped)
        return net
    if isinstance(edit, BlockLaneAtJunction):
        net, dropped = _block(net, edit)
        report.dropped_connections.extend(dropped)
        return net
    if isinstance(edit, RemoveSignal):
        return remove_signal(net, edit.node)
    if isinstance(edit, ForbidLaneChange):
        return forbid_lane_change(net, edit.edge)
    if isinstance(edit, CloseEdge):
        if edit.edge not in net.edges:
            raise PolicyError(f"unknown edge {edit.edge!r}")
        if not 0 <= edit.start_s < edit.end_s:
            raise PolicyError("closure needs 0 <= start_s < end_s")
        report.closures.append(edit)
        return net
    raise PolicyError(f"unsupported edit {edit!r}")


def apply_policy(net: RoadNetwork, script: PolicyScript) -> Tuple[RoadNetwork, ApplicationReport]:
    """Apply ``script`` edit by edit.

    The input network is never modified. On the first failing edit a
    :class:`PolicyError` carrying the edit index is raised.
    """
    report = ApplicationReport()
    out = net
    for i, edit in enumerate(script.edits):
        try:
            out = _apply_one(out, edit, report)
        except PolicyError as exc:
            raise PolicyError(exc.reason, i) from None
    sinks = set(e for taz in out.tazs.values() for e in taz.edges)
    if sinks:
        reach_any = _reachable_to(out, sinks)
        for o in out.origin_edges():
            if o not in reach_any:
                report.warnings.append(f"origin {o} cannot reach any TAZ member")
    return out, report


# -- script files ------------------------------------------------------------

def _conn_from_dict(d: dict) -> Connection:
    return Connection(d["from_edge"], int(d["from_lane"]), d["to_edge"], int(d["to_lane"]),
                      bool(d.get("yield", False)), d.get("id"))


def edit_from_dict(d: dict) -> PolicyEdit:
    op = d.get("op")
    try:
        if op == "reverse_edge":
            return ReverseEdge(d["edge"], tuple(_conn_from_dict(c) for c in d.get("remap", [])),
                               d.get("join_taz"))
        if op == "block_lane_at_junction":
            return BlockLaneAtJunction(d["edge"], int(d["lane"]))
        if op == "remove_signal":
            return RemoveSignal(d["node"])
        if op == "forbid_lane_change":
            return ForbidLaneChange(d["edge"])
        if op == "close_edge":
            return CloseEdge(d["edge"], float(d["start_s"]), float(d["end_s"]))
    except KeyError as exc:
        raise PolicyError(f"{op}: missing field {exc.args[0]!r}") from None
    raise PolicyError(f"unknown op {op!r}")


def edit_to_dict(edit: PolicyEdit) -> dict:
    if isinstance(edit, ReverseEdge):
        d = {"op": "reverse_edge", "edge": edit.edge}
        if edit.remap:
            d["remap"] = [{"from_edge": c.from_edge, "from_lane": c.from_lane,
                           "to_edge": c.to_edge, "to_lane": c.to_lane,
                           "yield": c.yield_required} for c in edit.remap]
        if edit.join_taz is not None:
            d["join_taz"] = edit.join_taz
        return d
    if isinstance(edit, BlockLaneAtJunction):
        return {"op": "block_lane_at_junction", "edge": edit.edge, "lane": edit.lane}
    if isinstance(edit, RemoveSignal):
        return {"op": "remove_signal", "node": edit.node}
    if isinstance(edit, ForbidLaneChange):
        return {"op": "forbid_lane_change", "edge": edit.edge}
    return {"op": "close_edge", "edge": edit.edge, "start_s": edit.start_s, "end_s": edit.end_s}


def parse_policy(text: str, name: str = "policy") -> PolicyScript:
    """Parse a policy file: a JSON list of edits, or ``{"name", "edits"}``."""
    doc = json.loads(text)
    if isinstance(doc, dict):
        name = doc.get("name", name)
        doc = doc.get("edits", [])
    if not isinstance(doc, list):
        raise PolicyError("policy file must hold a list of edits")
    return PolicyScript(tuple(edit_from_dict(d) for d in doc), name)


def serialize_policy(script: PolicyScript) -> str:
    return json.dumps({"name": script.name, "edits": [edit_to_dict(e) for e in script.edits]},
                      indent=1)


def load_policy(path) -> PolicyScript:
    with open(path, encoding="utf-8") as fh:
        return parse_policy(fh.read())


__all__ = [
    "PolicyError", "ReverseEdge", "BlockLaneAtJunction", "RemoveSignal", "ForbidLaneChange",
    "CloseEdge", "PolicyScript", "ApplicationReport", "reverse_edge", "block_lane_at_junction",
    "remove_signal", "forbid_lane_change", "apply_policy", "parse_policy", "serialize_policy",
    "load_policy", "priority_yields", "path_is_connected",
]
