"""Trip generation: spatial vehicle allocation plus Gamma departure times."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .network import RoadNetwork, _reachable_to

log = logging.getLogger(__name__)

ROUTING_MODES = ("fixed_shortest", "dynamic")
DEMAND_HEADER = ["vehicle_id", "depart_s", "origin_edge", "origin_pos_m", "destination",
                 "routing_mode"]


class DemandError(ValueError):
    pass


@dataclass(frozen=True)
class Trip:
    vehicle_id: str
    depart_s: float
    origin_edge: str
    destination: str
    routing_mode: str = "fixed_shortest"
    origin_pos_m: float = 0.0


@dataclass(frozen=True)
class DemandSet:
    trips: Tuple[Trip, ...]
    seed: Optional[int] = None
    provenance: Dict[str, object] = field(default_factory=dict, compare=False)
    warnings: Tuple[str, ...] = field(default=(), compare=False)

    def __len__(self) -> int:
        return len(self.trips)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(DEMAND_HEADER)
        for t in self.trips:
            w.writerow([t.vehicle_id, f"{t.depart_s:.3f}", t.origin_edge, f"{t.origin_pos_m:.3f}",
                        t.destination, t.routing_mode])
        return buf.getvalue()

    def with_routing_mode(self, mode: str) -> "DemandSet":
        if mode not in ROUTING_MODES:
            raise DemandError(f"unknown routing mode {mode!r}")
        trips = tuple(Trip(t.vehicle_id, t.depart_s, t.origin_edge, t.destination, mode,
                           t.origin_pos_m) for t in self.trips)
        return DemandSet(trips, self.seed, dict(self.provenance, routing_mode=mode), self.warnings)


def parse_demand_csv(text: str) -> DemandSet:
    rows = list(csv.DictReader(io.StringIO(text)))
    trips = []
    for r in rows:
        try:
            trips.append(Trip(r["vehicle_id"], float(r["depart_s"]), r["origin_edge"],
                              r["destination"], r.get("routing_mode") or "fixed_shortest",
                              float(r.get("origin_pos_m") or 0.0)))
        except (KeyError, ValueError) as exc:
            raise DemandError(f"bad demand row {r}: {exc}") from None
    trips.sort(key=lambda t: (t.depart_s, t.vehicle_id))
    ids = [t.vehicle_id for t in trips]
    if len(set(ids)) != len(ids):
        raise DemandError("duplicate vehicle ids in demand file")
    return DemandSet(tuple(trips))


def load_demand(path) -> DemandSet:
    with open(path, encoding="utf-8") as fh:
        return parse_demand_csv(fh.read())


def save_demand(demand: DemandSet, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(demand.to_csv())


@dataclass(frozen=True)
class GammaTemporal:
    """Departure-time model given by mean and standard deviation in hours."""

    mean_h: float = 3.0
    std_h: float = 0.7

    def __post_init__(self):
        if not (self.mean_h > 0 and self.std_h > 0):
            raise DemandError("Gamma mean and std must be positive")

    @property
    def shape(self) -> float:
        return (self.mean_h / self.std_h) ** 2

    @property
    def scale_h(self) -> float:
        return self.std_h ** 2 / self.mean_h


@dataclass(frozen=True)
class SpatialAllocation:
    density_residential: float = 0.0417
    parking_ratio: float = 4.0
    portion: float = 1.0
    min_count_threshold: int = 1

    def __post_init__(self):
        if self.density_residential <= 0:
            raise DemandError("density must be positive")
        if self.parking_ratio < 1:
            raise DemandError("parking_ratio must be >= 1")
        if not 0 < self.portion <= 1:
            raise DemandError("portion must lie in (0, 1]")


def edge_vehicle_count(length_m: float, road_type: str, alloc: SpatialAllocation) -> int:
    density = alloc.density_residential
    if road_type == "service":
        density *= alloc.parking_ratio
    # tolerance keeps exact products such as 0.5 * 200 from flooring to 199
    n = int(math.floor(density * length_m * alloc.portion + 1e-9))
    return n if n >= alloc.min_count_threshold else 0


def allocate_origins(net: RoadNetwork, alloc: SpatialAllocation) -> List[Tuple[str, int]]:
    """Vehicle count per origin-eligible edge, sorted by edge id.

    Edges with zero vehicles are omitted. An all-zero allocation is logged,
    not raised.
    """
    out = []
    for eid in sorted(net.origin_edges()):
        e = net.edges[eid]
        n = edge_vehicle_count(e.length, e.road_type, alloc)
        if n > 0:
            out.append((eid, n))
    if not out:
        log.warning("allocation yields zero vehicles")
    return out


def sample_departures(model: GammaTemporal, n: int, seed) -> np.ndarray:
    """Draw ``n`` departure times in seconds, sorted ascending."""
    if n < 1:
        raise DemandError("n must be >= 1")
    rng = np.random.default_rng(seed)
    return np.sort(rng.gamma(model.shape, model.scale_h, size=n) * 3600.0)


def _finish(raw: List[Tuple[float, str, float]], destination: str, routing_mode: str,
            seed, provenance: dict, warnings: List[str]) -> DemandSet:
    # ms resolution so the CSV round trip is exact
    raw = [(round(d, 3), o, round(p, 3)) for d, o, p in raw]
    raw.sort()
    trips = tuple(Trip(f"veh_{i}", d, o, destination, routing_mode, p)
                  for i, (d, o, p) in enumerate(raw))
    return DemandSet(trips, seed, provenance, tuple(warnings))


def generate_demand(net: RoadNetwork, alloc: SpatialAllocation, temporal: GammaTemporal,
                    destination: str, routing_mode: str = "fixed_shortest",
                    seed: int = 0) -> DemandSet:
    """Build one trip per allocated vehicle.

    Positions and departures are independent draws. Origins that cannot reach
    the destination are dropped and listed in ``warnings``.

    Args:
        net: road network.
        alloc: spatial density parameters.
        temporal: Gamma departure model.
        destination: TAZ id or edge id.
        routing_mode: ``fixed_shortest`` or ``dynamic``.
        seed: generator seed; identical inputs give identical trips.
    """
    if routing_mode not in ROUTING_MODES:
        raise DemandError(f"unknown routing mode {routing_mode!r}")
    try:
        sinks = net.resolve_destination(destination)
    except KeyError as exc:
        raise DemandError(str(exc)) from None
    can_reach = _reachable_to(net, sinks)
    rng = np.random.default_rng(seed)
    warnings = []
    origins = []
    for eid, n in allocate_origins(net, alloc):
        if eid not in can_reach:
            warnings.append(f"origin {eid} cannot reach {destination}; {n} trips dropped")
            continue
        origins.append((eid, n))
    total = sum(n for _, n in origins)
    raw = []
    if total:
        positions = rng.uniform(0.0, 1.0, size=total)
        departs = rng.gamma(temporal.shape, temporal.scale_h, size=total) * 3600.0
        k = 0
        for eid, n in origins:
            length = net.edges[eid].length
            for _ in range(n):
                raw.append((float(departs[k]), eid, float(positions[k]) * length))
                k += 1
    for w in warnings:
        log.warning(w)
    prov = {"density": alloc.density_residential, "parking_ratio": alloc.parking_ratio,
            "portion": alloc.portion, "mean_h": temporal.mean_h, "std_h": temporal.std_h,
            "destination": destination, "routing_mode": routing_mode}
    return _finish(raw, destination, routing_mode, seed, prov, warnings)


def events_to_demand(net: RoadNetwork, events, block_edges: Dict[str, Sequence[str]],
                     destination: str, routing_mode: str = "fixed_shortest",
                     seed: int = 0) -> DemandSet:
    """Turn point-process events into trips.

    Each event departs from an edge of its block chosen with probability
    proportional to edge length, at a uniform position along it.
    """
    rng = np.random.default_rng(seed)
    raw = []
    for ev in events:
        edges = sorted(block_edges[ev.block])
        lengths = np.array([net.edges[e].length for e in edges])
        i = int(rng.choice(len(edges), p=lengths / lengths.sum()))
        raw.append((float(ev.t), edges[i], float(rng.uniform(0.0, lengths[i]))))
    prov = {"source": "point_process", "events": len(raw), "destination": destination}
    return _finish(raw, destination, routing_mode, seed, prov, [])


def grid_blocks(net: RoadNetwork, nx: int, ny: int) -> Dict[str, Tuple[str, ...]]:
    """Partition origin-eligible edges into an ``nx`` by ``ny`` grid of blocks by midpoint."""
    mids = {}
    for eid in net.origin_edges():
        e = net.edges[eid]
        a, b = net.nodes[e.from_node], net.nodes[e.to_node]
        mids[eid] = ((a.x + b.x) / 2, (a.y + b.y) / 2)
    if not mids:
        return {}
    xs = [m[0] for m in mids.values()]
    ys = [m[1] for m in mids.values()]
    x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
    blocks: Dict[str, list] = {}
    for eid in sorted(mids):
        x, y = mids[eid]
        i = min(nx - 1, int((x - x0) / (x1 - x0 + 1e-9) * nx))
        j = min(ny - 1, int((y - y0) / (y1 - y0 + 1e-9) * ny))
        blocks.setdefault(f"b{i}_{j}", []).append(eid)
    return {k: tuple(v) for k, v in sorted(blocks.items())}
