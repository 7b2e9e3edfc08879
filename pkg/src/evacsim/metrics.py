"""Evacuation curves, the gap-area metric, speed maps and scenario tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .network import RoadNetwork

DEFAULT_GRID = 0.001


class MetricsError(ValueError):
    pass


class InverseCurve:
    """Time as a function of cumulative fraction, piecewise linear in ``p``.

    Knots may repeat a ``p`` value, which encodes a jump in time; empirical
    curves are built that way so that every cell integral stays exact.
    """

    def __init__(self, p: Sequence[float], t: Sequence[float]):
        p = np.asarray(p, float)
        t = np.asarray(t, float)
        if p.shape != t.shape or p.size < 1:
            raise MetricsError("knot arrays must match and be nonempty")
        if np.any(np.diff(p) < 0) or np.any(np.diff(t) < -1e-12):
            raise MetricsError("inverse curve knots must be nondecreasing")
        self.p, self.t = p, t
        seg = np.diff(p) * (t[:-1] + t[1:]) / 2.0
        self._cum = np.concatenate([[0.0], np.cumsum(seg)])

    @classmethod
    def from_times(cls, times: Sequence[float], total: int) -> "InverseCurve":
        """Quantile curve of ``times`` with fractions relative to ``total``."""
        ts = np.sort(np.asarray(times, float))
        n = ts.size
        if n == 0:
            return cls([0.0], [0.0])
        k = np.arange(n)
        p = np.empty(2 * n)
        t = np.empty(2 * n)
        p[0::2] = k / total
        p[1::2] = (k + 1) / total
        t[0::2] = ts
        t[1::2] = ts
        return cls(p, t)

    @property
    def terminal(self) -> float:
        return float(self.p[-1])

    def __call__(self, q: float) -> float:
        """Smallest time at which fraction ``q`` is reached (left limit at jumps)."""
        p, t = self.p, self.t
        if q <= p[0]:
            return float(t[0])
        if q > p[-1] + 1e-12:
            return math.inf
        i = int(np.searchsorted(p, q, side="left"))
        i = min(i, p.size - 1)
        if p[i] == q:
            return float(t[i])
        a, b = i - 1, i
        w = (q - p[a]) / (p[b] - p[a])
        return float(t[a] + w * (t[b] - t[a]))

    def integral_to(self, q: float) -> float:
        """Exact integral of the curve over ``[p[0], q]``."""
        p, t = self.p, self.t
        if q <= p[0]:
            return 0.0
        if q >= p[-1]:
            return float(self._cum[-1])
        i = int(np.searchsorted(p, q, side="right")) - 1
        w = (q - p[i]) / (p[i + 1] - p[i])
        tq = t[i] + w * (t[i + 1] - t[i])
        return float(self._cum[i] + (q - p[i]) * (t[i] + tq) / 2.0)


@dataclass
class EvacCurve:
    """Cumulative demand and finished curves, stored as their inverses.

    Args:
        demand: time (s) at which each demand fraction has departed.
        finished: time (s) at which each fraction of all trips has finished.
        total: number of trips.
        stranded: trips that never finished; they make ``finished`` end below 1.
    """

    demand: InverseCurve
    finished: InverseCurve
    total: int
    stranded: int = 0
    depart_times: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    arrive_times: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    @property
    def flagged(self) -> bool:
        return self.stranded > 0 or self.finished.terminal < self.demand.terminal - 1e-12

    def demand_frac(self, t: float) -> float:
        return float(np.searchsorted(self.depart_times, t, side="right")) / max(self.total, 1)

    def finished_frac(self, t: float) -> float:
        return float(np.searchsorted(self.arrive_times, t, side="right")) / max(self.total, 1)

    @classmethod
    def from_piecewise(cls, demand_knots: Sequence[Tuple[float, float]],
                       finished_knots: Sequence[Tuple[float, float]], unit_s: float = 3600.0) -> "EvacCurve":
        """Build from ``(fraction, time)`` knots; times are in ``unit_s`` seconds."""
        d = np.asarray(demand_knots, float)
        f = np.asarray(finished_knots, float)
        return cls(InverseCurve(d[:, 0], d[:, 1] * unit_s), InverseCurve(f[:, 0], f[:, 1] * unit_s), 0)


def build_curves(demand, trips) -> EvacCurve:
    """Curves from a demand set (or departure times) and per-trip records.

    Stranded or unfinished trips are excluded from the finished curve and
    counted in ``stranded``.
    """
    departs = [t.depart_s for t in demand.trips] if hasattr(demand, "trips") else list(demand)
    n = len(departs)
    arrivals = [r.arrive_s for r in trips if getattr(r, "status", "finished") == "finished"
                and r.arrive_s is not None]
    stranded = n - len(arrivals)
    dt = np.sort(np.asarray(departs, float))
    at = np.sort(np.asarray(arrivals, float))
    return EvacCurve(InverseCurve.from_times(dt, max(n, 1)), InverseCurve.from_times(at, max(n, 1)),
                     n, stranded, dt, at)


def gap_area(curve: EvacCurve, grid: float = DEFAULT_GRID, rule: str = "exact") -> float:
    """Area between the finished and demand curves over the percentage grid, in hours.

    ``rule="exact"`` integrates each grid cell exactly, so the result equals
    the mean of (finished minus demand) time over fractions, i.e. the average
    trip time for empirical curves. ``rule="left"`` evaluates both curves at
    the left edge of each cell.

    Raises:
        MetricsError: the finished curve ends below the demand curve (stranded trips).
    """
    fin, dem = curve.finished, curve.demand
    if fin.terminal < dem.terminal - 1e-12:
        raise MetricsError(f"finished curve ends at {fin.terminal:.4f} below demand "
                           f"{dem.terminal:.4f}: {curve.stranded} stranded vehicles")
    top = dem.terminal
    m = int(round(top / grid))
    edges = np.linspace(0.0, top, m + 1)
    if rule == "exact":
        # exact per-cell integrals telescope, so the grid only fixes the upper limit
        return (fin.integral_to(top) - dem.integral_to(top)) / 3600.0
    if rule == "left":
        s = 0.0
        for a, b in zip(edges[:-1], edges[1:]):
            s += (b - a) * (fin(a) - dem(a))
        return s / 3600.0
    raise MetricsError(f"unknown rule {rule!r}")


def time_to_fraction(curve: EvacCurve, q: float) -> float:
    """Seconds until fraction ``q`` of all trips has finished (inf if never)."""
    return curve.finished(q)


def completion_time(curve: EvacCurve) -> float:
    return float(curve.arrive_times[-1]) if curve.arrive_times.size else math.inf


# -- speed maps ------------------------------------------------------------------

@dataclass
class SpeedMap:
    bin_s: float
    cells: Dict[Tuple[str, int], Tuple[float, int]]
    edges: Tuple[str, ...] = ()

    def mean(self, edge: str, bin_index: int) -> Optional[float]:
        c = self.cells.get((edge, bin_index))
        return None if c is None else c[0]

    def count(self, edge: str, bin_index: int) -> int:
        c = self.cells.get((edge, bin_index))
        return 0 if c is None else c[1]

    def bins(self) -> List[int]:
        return sorted({b for _, b in self.cells})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["edge", "bin_start_s", "mean_speed_mps", "samples"])
        for (e, b) in sorted(self.cells):
            m, n = self.cells[(e, b)]
            w.writerow([e, _num(b * self.bin_s), f"{m:.4f}", n])
        return buf.getvalue()


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def build_speed_map(trajectories, net: RoadNetwork, bin_s: float = 1800.0) -> SpeedMap:
    """Per-edge, per-bin mean of trajectory speed samples.

    Args:
        trajectories: iterable of ``(t, vehicle_id, edge, lane, pos, speed)`` rows.
        net: network used to validate edge ids.
        bin_s: bin width in seconds.
    """
    sums: Dict[Tuple[str, int], List[float]] = {}
    for row in trajectories:
        t, edge, speed = float(row[0]), row[2], float(row[5])
        if edge not in net.edges:
            raise MetricsError(f"trajectory sample on unknown edge {edge!r}")
        key = (edge, int(t // bin_s))
        c = sums.get(key)
        if c is None:
            sums[key] = [speed, 1]
        else:
            c[0] += speed
            c[1] += 1
    return SpeedMap(bin_s, {k: (v[0] / v[1], int(v[1])) for k, v in sums.items()},
                    tuple(sorted(net.edges)))


def speed_map_from_cells(cells: Dict[Tuple[str, int], List[float]], net: RoadNetwork,
                         bin_s: float) -> SpeedMap:
    """Speed map from the engine's online accumulators."""
    return SpeedMap(bin_s, {k: (v[0] / v[1], int(v[1])) for k, v in cells.items() if v[1]},
                    tuple(sorted(net.edges)))


# -- tables and files ------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioRow:
    scenario: str
    gap_area_h: float
    t50_s: float
    t90_s: float
    t95_s: float


def summarize_scenarios(items: Sequence[Tuple[str, EvacCurve]]) -> List[ScenarioRow]:
    if not items:
        raise MetricsError("need at least one scenario")
    rows = []
    for sid, curve in items:
        try:
            g = gap_area(curve)
        except MetricsError:
            g = math.inf
        rows.append(ScenarioRow(sid, g, time_to_fraction(curve, 0.5), time_to_fraction(curve, 0.9),
                                time_to_fraction(curve, 0.95)))
    return rows


def comparison_csv(rows: Iterable[ScenarioRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario", "gap_area_h", "t50_s", "t90_s", "t95_s"])
    for r in rows:
        w.writerow([r.scenario, f"{r.gap_area_h:.6f}", _num(r.t50_s), _num(r.t90_s), _num(r.t95_s)])
    return buf.getvalue()


def curves_csv(curve: EvacCurve) -> str:
    """Cumulative fractions at every departure or arrival time."""
    times = np.unique(np.concatenate([[0.0], curve.depart_times, curve.arrive_times]))
    n = max(curve.total, 1)
    d = np.searchsorted(curve.depart_times, times, side="right") / n
    f = np.searchsorted(curve.arrive_times, times, side="right") / n
    buf = io.StringIO()
    buf.write("t_s,demand_frac,finished_frac\n")
    for t, a, b in zip(times, d, f):
        buf.write(f"{_num(t)},{a:.6f},{b:.6f}\n")
    return buf.getvalue()


# -- SVG -------------------------------------------------------------------------

def curves_svg(named: Sequence[Tuple[str, EvacCurve]], width: int = 640, height: int = 400) -> str:
    """Line plot of demand (dashed) and finished (solid) fractions over hours."""
    pad = 40
    tmax = max([c.arrive_times[-1] for _, c in named if c.arrive_times.size] +
               [c.depart_times[-1] for _, c in named if c.depart_times.size] + [1.0])
    sx = (width - 2 * pad) / tmax
    sy = height - 2 * pad
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
           f'<text x="{width / 2}" y="{height - 8}" font-size="12">time (h), max {tmax / 3600:.2f}</text>']

    def path(times, total):
        pts = [(pad, height - pad)]
        for k, t in enumerate(times):
            x = pad + t * sx
            pts.append((x, height - pad - k / total * sy))
            pts.append((x, height - pad - (k + 1) / total * sy))
        return " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)

    for i, (name, c) in enumerate(named):
        col = colors[i % len(colors)]
        n = max(c.total, 1)
        # thin long curves so the file stays small
        stride = max(1, c.depart_times.size // 500)
        out.append(f'<polyline fill="none" stroke="{col}" stroke-dasharray="4 3" '
                   f'points="{path(c.depart_times[::stride], n / stride)}"/>')
        stride = max(1, c.arrive_times.size // 500)
        out.append(f'<polyline fill="none" stroke="{col}" '
                   f'points="{path(c.arrive_times[::stride], n / stride)}"/>')
        out.append(f'<text x="{pad + 8}" y="{pad + 14 * (i + 1)}" font-size="12" fill="{col}">'
                   f'{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def speed_color(ratio: Optional[float]) -> str:
    """Red (stopped) to green (at the limit); grey for empty cells."""
    if ratio is None:
        return "#bbbbbb"
    r = min(max(ratio, 0.0), 1.0)
    return f"#{int(255 * (1 - r)):02x}{int(200 * r):02x}30"


def speed_map_svg(sm: SpeedMap, net: RoadNetwork, bin_index: int, width: int = 800) -> str:
    """Network drawing with each edge colored by its mean speed over the speed limit."""
    xs = [n.x for n in net.nodes.values()]
    ys = [n.y for n in net.nodes.values()]
    x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
    span = max(x1 - x0, y1 - y0, 1.0)
    pad = 20
    scale = (width - 2 * pad) / span
    height = int((y1 - y0) * scale + 2 * pad)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    for eid in sorted(net.edges):
        e = net.edges[eid]
        a, b = net.nodes[e.from_node], net.nodes[e.to_node]
        m = sm.mean(eid, bin_index)
        col = speed_color(None if m is None else m / e.speed_limit)
        out.append(f'<line data-edge="{eid}" data-mean="{"" if m is None else f"{m:.4f}"}" '
                   f'x1="{pad + (a.x - x0) * scale:.1f}" y1="{height - pad - (a.y - y0) * scale:.1f}" '
                   f'x2="{pad + (b.x - x0) * scale:.1f}" y2="{height - pad - (b.y - y0) * scale:.1f}" '
                   f'stroke="{col}" stroke-width="{1 + e.num_lanes}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
