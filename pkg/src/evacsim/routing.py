"""Shortest-distance and fastest-time routing over connection-respecting edge paths.

Route cost counts every edge on the route, the origin edge included. Ties
on cost are broken by fewer edges, then by the lexicographically smaller
edge sequence (equivalently, the smaller edge id at the first divergence).
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

from .network import RoadNetwork

HISTORY = 5
INF = math.inf


class RoutingError(ValueError):
    pass


class TravelTimeTable:
    """Last-five traversal history per edge with a mean as the smoothed value.

    ``version`` increases on every record so route caches can key on it.
    """

    def __init__(self, net: RoadNetwork):
        self._free = {e.id: e.free_flow_time for e in net.edges.values()}
        self._hist: Dict[str, deque] = {}
        self._smooth: Dict[str, float] = {}
        self.version = 0

    def record(self, edge_id: str, travel_time_s: float) -> None:
        if edge_id not in self._free:
            raise RoutingError(f"unknown edge {edge_id!r}")
        if not travel_time_s > 0:
            raise RoutingError(f"travel time must be positive, got {travel_time_s}")
        h = self._hist.setdefault(edge_id, deque(maxlen=HISTORY))
        h.append(float(travel_time_s))
        self._smooth[edge_id] = sum(h) / len(h)
        self.version += 1

    def smoothed(self, edge_id: str) -> float:
        s = self._smooth.get(edge_id)
        return s if s is not None else self._free[edge_id]

    def history(self, edge_id: str) -> Tuple[float, ...]:
        return tuple(self._hist.get(edge_id, ()))

    def copy(self) -> "TravelTimeTable":
        out = TravelTimeTable.__new__(TravelTimeTable)
        out._free = self._free
        out._hist = {k: deque(v, maxlen=HISTORY) for k, v in self._hist.items()}
        out._smooth = dict(self._smooth)
        out.version = self.version
        return out

    def to_csv(self) -> str:
        lines = ["edge_id,smoothed_s,history"]
        for e in sorted(self._free):
            hist = " ".join(f"{x:.3f}" for x in self.history(e))
            lines.append(f"{e},{self.smoothed(e):.6f},{hist}")
        return "\n".join(lines) + "\n"


def record_traversal(tt: TravelTimeTable, edge_id: str, travel_time_s: float) -> TravelTimeTable:
    """Return a copy of ``tt`` with one more record for ``edge_id``."""
    out = tt.copy()
    out.record(edge_id, travel_time_s)
    return out


@dataclass(frozen=True)
class Route:
    edges: Tuple[str, ...]
    cost: float
    stranded: bool = False

    @property
    def reachable(self) -> bool:
        return bool(self.edges)

    def __len__(self) -> int:
        return len(self.edges)


UNREACHABLE = Route((), INF)

Label = Tuple[float, int, Tuple[str, ...]]


class RouteTree:
    """Best route from every edge to a destination set, built backwards.

    Labels compare as ``(cost, hops, edges)``, which is preserved when an edge
    is prepended, so one reverse Dijkstra settles the tie rule exactly.
    """

    def __init__(self, net: RoadNetwork, sinks: Sequence[str], cost: Callable[[str], float],
                 closed: FrozenSet[str] = frozenset()):
        self.net = net
        self.sinks = frozenset(sinks)
        self.cost = cost
        self.closed = closed
        labels: Dict[str, Label] = {}
        heap: List[Label] = []
        for s in sorted(self.sinks):
            if s in closed:
                continue
            heapq.heappush(heap, (cost(s), 1, (s,)))
        while heap:
            lab = heapq.heappop(heap)
            e = lab[2][0]
            if e in labels:
                continue
            labels[e] = lab
            for p in net.predecessors(e):
                if p in labels or p in closed:
                    continue
                c = cost(p)
                if c == INF:
                    continue
                heapq.heappush(heap, (c + lab[0], lab[1] + 1, (p,) + lab[2]))
        self.labels = labels

    def route_from(self, edge_id: str) -> Route:
        """Route starting on ``edge_id``, which may itself be closed (already occupied)."""
        if edge_id not in self.net.edges:
            raise RoutingError(f"unknown edge {edge_id!r}")
        if edge_id in self.sinks:
            return Route((edge_id,), self.cost(edge_id))
        best: Optional[Label] = None
        for s in self.net.successors(edge_id):
            lab = self.labels.get(s)
            if lab is not None and (best is None or lab < best):
                best = lab
        if best is None:
            return UNREACHABLE
        return Route((edge_id,) + best[2], self.cost(edge_id) + best[0])


def _dest(net: RoadNetwork, origin: str, dest: str) -> Tuple[str, ...]:
    if origin not in net.edges:
        raise RoutingError(f"unknown edge {origin!r}")
    try:
        return net.resolve_destination(dest)
    except KeyError as exc:
        raise RoutingError(str(exc)) from None


def distance_cost(net: RoadNetwork) -> Callable[[str], float]:
    edges = net.edges
    return lambda e: edges[e].length


def shortest_path_distance(net: RoadNetwork, origin_edge: str, dest: str,
                           closed: Iterable[str] = ()) -> Route:
    """Minimum total-length route; :data:`UNREACHABLE` when none exists."""
    sinks = _dest(net, origin_edge, dest)
    return RouteTree(net, sinks, distance_cost(net), frozenset(closed)).route_from(origin_edge)


def fastest_path(net: RoadNetwork, tt: TravelTimeTable, origin_edge: str, dest: str,
                 closed: Iterable[str] = ()) -> Route:
    """Minimum total smoothed travel time route; closed edges cost infinity."""
    sinks = _dest(net, origin_edge, dest)
    return RouteTree(net, sinks, tt.smoothed, frozenset(closed)).route_from(origin_edge)


class Router:
    """Caches one route tree per (mode, destination, table version, closure set)."""

    def __init__(self, net: RoadNetwork):
        self.net = net
        self._cache: Dict[tuple, RouteTree] = {}
        self._dist = distance_cost(net)

    def tree(self, dest: str, tt: Optional[TravelTimeTable] = None,
             closed: FrozenSet[str] = frozenset()) -> RouteTree:
        key = (dest, None if tt is None else (id(tt), tt.version), closed)
        t = self._cache.get(key)
        if t is None:
            if len(self._cache) > 256:
                self._cache.clear()
            sinks = self.net.resolve_destination(dest)
            if tt is None:
                t = RouteTree(self.net, sinks, self._dist, closed)
            else:
                # freeze the costs so later records cannot leak into this tree
                snap = {e: tt.smoothed(e) for e in self.net.edges}
                t = RouteTree(self.net, sinks, snap.__getitem__, closed)
            self._cache[key] = t
        return t

    def shortest(self, origin: str, dest: str, closed: FrozenSet[str] = frozenset()) -> Route:
        return self.tree(dest, None, closed).route_from(origin)

    def fastest(self, tt: TravelTimeTable, origin: str, dest: str,
                closed: FrozenSet[str] = frozenset()) -> Route:
        return self.tree(dest, tt, closed).route_from(origin)


def reroute_batch(net: RoadNetwork, tt: TravelTimeTable, vehicles: Sequence[Tuple[str, str]],
                  closed: Iterable[str] = (), router: Optional[Router] = None) -> List[Route]:
    """Fastest route for each ``(current_edge, dest)`` pair.

    A vehicle already on a closed edge continues from it; a vehicle with no
    open route gets a route flagged ``stranded``.
    """
    router = router or Router(net)
    closed = frozenset(closed)
    out = []
    for cur, dest in vehicles:
        if cur not in net.edges:
            raise RoutingError(f"unknown edge {cur!r}")
        r = router.fastest(tt, cur, dest, closed)
        out.append(r if r.reachable else Route((cur,), INF, stranded=True))
    return out


def route_cost(route: Sequence[str], cost: Callable[[str], float]) -> float:
    return sum(cost(e) for e in route)
