"""Block-discretized point processes for demand: Poisson, Hawkes, multivariate Hawkes.

Space is cut into blocks; each event carries a time and a block. The
conditional intensity of block ``b`` is

    lambda_b(t) = mu_b(t) + sum_{t_i < t} alpha[b_i, b] * exp(-beta * (t - t_i))

with ``mu_b`` piecewise constant over ``breaks``. Poisson families are the
special case ``alpha = 0``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

KINDS = ("homogeneous", "inhom_poisson", "hawkes", "multivariate_hawkes")
FLOOR = 1e-8


class PointProcessError(ValueError):
    pass


@dataclass(frozen=True)
class EventRecord:
    t: float
    block: str = "0"


@dataclass(frozen=True)
class PointProcessModel:
    """Intensity specification.

    Args:
        kind: one of ``KINDS``.
        window: observation window ``(t_start, t_end)`` in seconds.
        blocks: spatial block ids; ``baseline`` and ``alpha`` rows follow this order.
        breaks: baseline bin edges, ascending, covering the window.
        baseline: ``baseline[b][k]`` is the rate of block ``b`` in bin ``k``.
        alpha: ``alpha[src][dst]`` jump added to ``dst``'s intensity by an event in ``src``.
        beta: shared exponential decay rate.
    """

    kind: str
    window: Tuple[float, float]
    blocks: Tuple[str, ...]
    breaks: Tuple[float, ...]
    baseline: Tuple[Tuple[float, ...], ...]
    alpha: Tuple[Tuple[float, ...], ...]
    beta: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PointProcessError(f"unknown kind {self.kind!r}")
        t0, t1 = self.window
        if not t1 > t0:
            raise PointProcessError("window must have t_end > t_start")
        br = self.breaks
        if len(br) < 2 or any(b >= a for a, b in zip(br[1:], br[:-1])):
            raise PointProcessError("breaks must be strictly ascending")
        if br[0] > t0 or br[-1] < t1:
            raise PointProcessError("breaks must cover the window")
        nb = len(self.blocks)
        if len(set(self.blocks)) != nb or nb == 0:
            raise PointProcessError("block ids must be unique and nonempty")
        if len(self.baseline) != nb or any(len(r) != len(br) - 1 for r in self.baseline):
            raise PointProcessError("baseline shape must be (blocks, bins)")
        if len(self.alpha) != nb or any(len(r) != nb for r in self.alpha):
            raise PointProcessError("alpha shape must be (blocks, blocks)")
        if min(min(r) for r in self.baseline) < 0 or min(min(r) for r in self.alpha) < 0:
            raise PointProcessError("rates must be nonnegative")
        if not self.beta > 0:
            raise PointProcessError("beta must be positive")

    @property
    def mu(self) -> np.ndarray:
        return np.asarray(self.baseline, dtype=float)

    @property
    def alpha_matrix(self) -> np.ndarray:
        return np.asarray(self.alpha, dtype=float)

    def branching_ratio(self) -> float:
        """Spectral radius of ``alpha / beta``; below 1 the process is stable."""
        a = self.alpha_matrix / self.beta
        return float(np.max(np.abs(np.linalg.eigvals(a)))) if a.any() else 0.0

    def block_index(self, block: str) -> int:
        try:
            return self.blocks.index(block)
        except ValueError:
            raise PointProcessError(f"unknown block {block!r}") from None

    def bin_of(self, t: float) -> int:
        k = int(np.searchsorted(self.breaks, t, side="right")) - 1
        return min(max(k, 0), len(self.breaks) - 2)

    def with_window(self, window: Tuple[float, float]) -> "PointProcessModel":
        return replace(self, window=(float(window[0]), float(window[1])))


def _tup(a) -> Tuple[Tuple[float, ...], ...]:
    return tuple(tuple(float(x) for x in row) for row in np.atleast_2d(np.asarray(a, float)))


def homogeneous(rate: float, window, blocks: Sequence[str] = ("0",)) -> PointProcessModel:
    nb = len(blocks)
    return PointProcessModel("homogeneous", tuple(window), tuple(blocks), tuple(window),
                             _tup([[rate]] * nb), _tup(np.zeros((nb, nb))))


def inhom_poisson(breaks: Sequence[float], rates, window=None,
                  blocks: Sequence[str] = ("0",)) -> PointProcessModel:
    """Piecewise-constant Poisson; ``rates`` is per bin, or per (block, bin)."""
    r = np.atleast_2d(np.asarray(rates, float))
    nb = len(blocks)
    if r.shape[0] == 1 and nb > 1:
        r = np.repeat(r, nb, axis=0)
    window = tuple(window) if window is not None else (breaks[0], breaks[-1])
    return PointProcessModel("inhom_poisson", window, tuple(blocks), tuple(float(b) for b in breaks),
                             _tup(r), _tup(np.zeros((nb, nb))))


def hawkes(mu, alpha: float, beta: float, window, breaks: Optional[Sequence[float]] = None,
           blocks: Sequence[str] = ("0",)) -> PointProcessModel:
    """Self-exciting process; each block excites only itself with amplitude ``alpha``."""
    nb = len(blocks)
    breaks = tuple(breaks) if breaks is not None else tuple(window)
    m = np.asarray(mu, float)
    if m.ndim == 0:
        m = np.full((nb, len(breaks) - 1), float(m))
    m = np.atleast_2d(m)
    if m.shape[0] == 1 and nb > 1:
        m = np.repeat(m, nb, axis=0)
    return PointProcessModel("hawkes", tuple(window), tuple(blocks), breaks, _tup(m),
                             _tup(np.eye(nb) * alpha), float(beta))


def multivariate_hawkes(mu, alpha, beta: float, window, blocks: Sequence[str],
                        breaks: Optional[Sequence[float]] = None) -> PointProcessModel:
    """Cross-exciting process; ``mu`` is per block (or per block and bin)."""
    breaks = tuple(breaks) if breaks is not None else tuple(window)
    m = np.asarray(mu, float)
    if m.ndim == 1:
        m = np.repeat(m[:, None], len(breaks) - 1, axis=1)
    return PointProcessModel("multivariate_hawkes", tuple(window), tuple(blocks), breaks,
                             _tup(m), _tup(alpha), float(beta))


# -- intensity and likelihood --------------------------------------------------

def _arrays(model: PointProcessModel, events) -> Tuple[np.ndarray, np.ndarray]:
    ts = np.array([e.t for e in events], dtype=float)
    bs = np.array([model.block_index(e.block) for e in events], dtype=np.int64)
    if ts.size and np.any(np.diff(ts) < 0):
        order = np.argsort(ts, kind="stable")
        ts, bs = ts[order], bs[order]
    return ts, bs


def hawkes_intensity(model: PointProcessModel, t: float, history: Sequence[EventRecord],
                     block: Optional[str] = None):
    """Conditional intensity at ``t`` given events strictly before ``t``.

    Returns the rate of ``block``, or the vector over all blocks when ``block``
    is None.
    """
    lam = model.mu[:, model.bin_of(t)].copy()
    a = model.alpha_matrix
    for ev in history:
        if ev.t < t:
            lam += a[model.block_index(ev.block)] * math.exp(-model.beta * (t - ev.t))
    if block is None:
        return lam
    return float(lam[model.block_index(block)])


def _baseline_integral(mu: np.ndarray, breaks: np.ndarray, t0: float, t1: float) -> float:
    lo = np.clip(breaks[:-1], t0, t1)
    hi = np.clip(breaks[1:], t0, t1)
    return float(mu.sum(axis=0) @ (hi - lo))


def _loglik_arrays(ts: np.ndarray, bs: np.ndarray, mu: np.ndarray, breaks: np.ndarray,
                   alpha: np.ndarray, beta: float, t0: float, t1: float) -> float:
    comp = _baseline_integral(mu, breaks, t0, t1)
    n = ts.size
    if n == 0:
        return -comp
    k = np.clip(np.searchsorted(breaks, ts, side="right") - 1, 0, len(breaks) - 2)
    lam = mu[bs, k]
    if alpha.any():
        nb = alpha.shape[0]
        if nb == 1:
            a = float(alpha[0, 0])
            excite = np.empty(n)
            r, prev = 0.0, ts[0]
            exp = math.exp
            for i, t in enumerate(ts.tolist()):
                r *= exp(-beta * (t - prev))
                excite[i] = r
                r += a
                prev = t
        else:
            excite = np.empty(n)
            r = np.zeros(nb)
            prev = ts[0]
            for i in range(n):
                r *= math.exp(-beta * (ts[i] - prev))
                excite[i] = r[bs[i]]
                r += alpha[bs[i]]
                prev = ts[i]
        lam = lam + excite
        out_mass = alpha.sum(axis=1)[bs]
        comp += float(np.sum(out_mass / beta * -np.expm1(-beta * (t1 - ts))))
    if np.any(lam <= 0):
        return -math.inf
    return float(np.sum(np.log(lam)) - comp)


def pp_loglik(model: PointProcessModel, events: Sequence[EventRecord], window=None) -> float:
    """Log-likelihood of ``events`` over the model window.

    The kernel compensator is integrated in closed form. An event where the
    intensity is zero gives ``-inf``.
    """
    t0, t1 = window if window is not None else model.window
    ts, bs = _arrays(model, events)
    if ts.size and (ts[0] < t0 or ts[-1] > t1):
        raise PointProcessError("event outside the window")
    return _loglik_arrays(ts, bs, model.mu, np.asarray(model.breaks, float),
                          model.alpha_matrix, model.beta, float(t0), float(t1))


# -- simulation ----------------------------------------------------------------

def pp_simulate(model: PointProcessModel, seed, window=None,
                max_events: Optional[int] = None) -> List[EventRecord]:
    """Ogata thinning against the intensity at the current point.

    Between events the kernel part only decays, so the current total intensity
    bounds the future one until the next baseline break.

    Raises:
        PointProcessError: self-exciting model with branching ratio >= 1.
    """
    if model.alpha_matrix.any() and model.branching_ratio() >= 1:
        raise PointProcessError(f"unstable: branching ratio {model.branching_ratio():.4f} >= 1")
    t0, t1 = window if window is not None else model.window
    rng = np.random.default_rng(seed)
    mu, alpha, beta = model.mu, model.alpha_matrix, model.beta
    breaks = np.asarray(model.breaks, float)
    r = np.zeros(len(model.blocks))
    out: List[EventRecord] = []
    t = float(t0)
    while t < t1:
        k = model.bin_of(t)
        nxt = min(float(breaks[k + 1]), float(t1)) if k + 1 < len(breaks) else float(t1)
        if nxt <= t:
            nxt = float(t1)
        base = mu[:, k]
        lam_bar = float(base.sum() + r.sum())
        if lam_bar <= 0:
            t = nxt
            continue
        dt = rng.exponential(1.0 / lam_bar)
        if t + dt >= nxt:
            r *= math.exp(-beta * (nxt - t))
            t = nxt
            continue
        t += dt
        r *= math.exp(-beta * dt)
        lam = base + r
        u = rng.uniform() * lam_bar
        cum = np.cumsum(lam)
        if u < cum[-1]:
            b = int(np.searchsorted(cum, u, side="right"))
            out.append(EventRecord(t, model.blocks[b]))
            r += alpha[b]
            if max_events is not None and len(out) >= max_events:
                break
    return out


# -- fitting -------------------------------------------------------------------

@dataclass
class FitResult:
    model: PointProcessModel
    loglik: float
    converged: bool
    iterations: int
    evaluations: int = 0
    history: List[float] = field(default_factory=list, repr=False)


def _unpack(theta: np.ndarray, family: str, nb: int, nbins: int):
    p = np.exp(theta)
    m = nb * nbins
    mu = p[:m].reshape(nb, nbins)
    if family in ("homogeneous", "inhom_poisson"):
        return mu, np.zeros((nb, nb)), 1.0
    beta = float(p[-1])
    if family == "hawkes":
        alpha = np.eye(nb) * p[m] * beta
    else:
        alpha = p[m:m + nb * nb].reshape(nb, nb) * beta
    return mu, alpha, beta


def pp_fit(events: Sequence[EventRecord], family: str, window,
           blocks: Optional[Sequence[str]] = None, breaks: Optional[Sequence[float]] = None,
           max_iter: int = 10_000, tol: float = 1e-8, step_h: float = 1e-4) -> FitResult:
    """Maximum-likelihood fit by coordinate-wise Newton ascent.

    Parameters are optimized in log space with numerical first and second
    derivatives, floored at 1e-8. Kernel amplitudes are parametrized as
    branching ratios ``alpha / beta`` to decorrelate them from ``beta``. One
    iteration is a full sweep over coordinates; convergence means the sweep
    changed the log-likelihood by less than ``tol``.

    Args:
        events: observed events, all inside ``window``.
        family: one of ``KINDS``.
        window: ``(t_start, t_end)``.
        blocks: block ids; defaults to the sorted set of event blocks.
        breaks: baseline bin edges; defaults to a single bin over the window.
        max_iter: sweep cap; on hitting it the best iterate is returned unconverged.
    """
    if family not in KINDS:
        raise PointProcessError(f"unknown family {family!r}")
    t0, t1 = float(window[0]), float(window[1])
    if blocks is None:
        blocks = tuple(sorted({e.block for e in events})) or ("0",)
    blocks = tuple(blocks)
    if family == "homogeneous":
        breaks = (t0, t1)
    breaks_a = np.asarray(breaks if breaks is not None else (t0, t1), float)
    nb, nbins = len(blocks), len(breaks_a) - 1
    shell = PointProcessModel("homogeneous", (t0, t1), blocks, tuple(breaks_a),
                              _tup(np.zeros((nb, nbins))), _tup(np.zeros((nb, nb))))
    ts, bs = _arrays(shell, events)
    if family != "inhom_poisson" and family != "homogeneous" and ts.size < 10:
        raise PointProcessError("need at least 10 events for a parametric fit")
    if ts.size and (ts[0] < t0 or ts[-1] > t1):
        raise PointProcessError("event outside the window")

    rate0 = max(ts.size / (t1 - t0) / nb, FLOOR)
    if family in ("homogeneous", "inhom_poisson"):
        theta = np.zeros(nb * nbins)
    else:
        kernel = [math.log(0.5)] if family == "hawkes" else [math.log(0.5 / nb)] * (nb * nb)
        theta = np.array([math.log(0.5 * rate0)] * (nb * nbins) + kernel
                         + [math.log(max(rate0 * nb, FLOOR))])
    lo = math.log(FLOOR)
    evals = 0

    def f(th):
        nonlocal evals
        evals += 1
        mu, alpha, beta = _unpack(th, family, nb, nbins)
        return _loglik_arrays(ts, bs, mu, breaks_a, alpha, beta, t0, t1)

    cur = f(theta)
    history = [cur]
    converged = False
    it = 0
    h = step_h
    for it in range(1, max_iter + 1):
        start = cur
        for j in range(theta.size):
            u = theta[j]
            tp, tm = theta.copy(), theta.copy()
            tp[j], tm[j] = u + h, u - h
            fp, fm = f(tp), f(tm)
            g = (fp - fm) / (2 * h)
            hess = (fp - 2 * cur + fm) / (h * h)
            if not math.isfinite(g):
                step = 1.0 if fp > fm else -1.0
            elif hess < 0:
                step = -g / hess
            else:
                step = math.copysign(1.0, g) if g != 0 else 0.0
            step = max(-2.0, min(2.0, step))
            for _ in range(40):
                if step == 0.0:
                    break
                trial = theta.copy()
                trial[j] = max(lo, u + step)
                ft = f(trial)
                if ft > cur:
                    theta, cur = trial, ft
                    break
                step *= 0.5
        history.append(cur)
        if abs(cur - start) < tol:
            converged = True
            break
    mu, alpha, beta = _unpack(theta, family, nb, nbins)
    model = PointProcessModel(family, (t0, t1), blocks, tuple(float(b) for b in breaks_a),
                              _tup(mu), _tup(alpha), beta)
    return FitResult(model, cur, converged, it, evals, history)


# -- event files ---------------------------------------------------------------

def events_to_csv(events: Sequence[EventRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t_s", "block"])
    for e in events:
        w.writerow([repr(float(e.t)), e.block])
    return buf.getvalue()


def parse_events_csv(text: str) -> List[EventRecord]:
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        try:
            out.append(EventRecord(float(r["t_s"]), r.get("block") or "0"))
        except (KeyError, ValueError) as exc:
            raise PointProcessError(f"bad event row {r}: {exc}") from None
    out.sort(key=lambda e: e.t)
    return out


def model_to_dict(model: PointProcessModel) -> dict:
    return {"kind": model.kind, "window": list(model.window), "blocks": list(model.blocks),
            "breaks": list(model.breaks), "baseline": [list(r) for r in model.baseline],
            "alpha": [list(r) for r in model.alpha], "beta": model.beta}


def model_from_dict(d: dict) -> PointProcessModel:
    return PointProcessModel(d["kind"], tuple(d["window"]), tuple(d["blocks"]),
                             tuple(d["breaks"]), _tup(d["baseline"]), _tup(d["alpha"]),
                             float(d.get("beta", 1.0)))
