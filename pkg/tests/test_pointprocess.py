import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from evacsim.pointprocess import (EventRecord, PointProcessError, events_to_csv, hawkes,
                                  hawkes_intensity, homogeneous, inhom_poisson, model_from_dict,
                                  model_to_dict, multivariate_hawkes, parse_events_csv, pp_fit,
                                  pp_loglik, pp_simulate)


def ev(*ts, block="0"):
    return [EventRecord(float(t), block) for t in ts]


def test_homogeneous_loglik_no_events():
    assert pp_loglik(homogeneous(1.0, (0, 1)), []) == pytest.approx(-1.0, abs=1e-12)


def test_homogeneous_loglik_one_event():
    assert pp_loglik(homogeneous(2.0, (0, 1)), ev(0.5)) == pytest.approx(math.log(2) - 2, abs=1e-12)


_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def _quadrature_loglik(mu, a, b, ts, T, n=200_001):
    # split at events so the kernel jumps do not smear the trapezoid rule
    integral = 0.0
    cuts = [0.0] + list(ts) + [T]
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        g = np.linspace(lo, hi, n // len(cuts))
        vals = np.full_like(g, mu)
        for t in ts:
            vals += np.where(g > t, a * np.exp(-b * (g - t)), 0.0)
        # the left end of each piece sits on an event: use its right limit
        for t in ts:
            if t == lo:
                vals[0] += a
        integral += _trapezoid(vals, g)
    logs = 0.0
    for i, t in enumerate(ts):
        logs += math.log(mu + sum(a * math.exp(-b * (t - s)) for s in ts[:i]))
    return logs - integral


def test_hawkes_loglik_matches_quadrature():
    m = hawkes(1.0, 0.5, 1.0, (0, 3))
    oracle = _quadrature_loglik(1.0, 0.5, 1.0, [1.0, 2.0], 3.0)
    assert pp_loglik(m, ev(1.0, 2.0)) == pytest.approx(oracle, abs=1e-6)


def test_zero_intensity_event_is_minus_inf():
    m = inhom_poisson([0, 1, 2], [0.0, 1.0])
    assert pp_loglik(m, ev(0.5)) == -math.inf


def test_event_outside_window_rejected():
    with pytest.raises(PointProcessError):
        pp_loglik(homogeneous(1.0, (0, 1)), ev(2.0))


@given(st.floats(0.01, 50), st.floats(0.5, 100),
       st.lists(st.floats(0, 1), max_size=30))
def test_homogeneous_loglik_closed_form(rate, T, us):
    ts = sorted(u * T for u in us)
    got = pp_loglik(homogeneous(rate, (0, T)), ev(*ts))
    assert got == pytest.approx(len(ts) * math.log(rate) - rate * T, rel=1e-9, abs=1e-9)


def test_intensity_no_history():
    m = hawkes(1.0, 0.5, 1.0, (0, 10))
    assert hawkes_intensity(m, 3.0, [], "0") == pytest.approx(1.0)


def test_intensity_one_event_ago():
    m = hawkes(1.0, 0.5, 1.0, (0, 10))
    assert hawkes_intensity(m, 3.0, ev(2.0), "0") == pytest.approx(1.18394, abs=1e-5)


def test_multivariate_zero_coupling():
    m = multivariate_hawkes([1.0, 0.3], [[0.7, 0.0], [0.0, 0.2]], 1.5, (0, 10), ["A", "B"])
    assert hawkes_intensity(m, 5.0, ev(4.5, 4.9, block="A"), "B") == pytest.approx(0.3)
    assert hawkes_intensity(m, 5.0, ev(4.5, block="A"), "A") > 1.0


@given(st.lists(st.floats(0, 9.9), min_size=1, max_size=8), st.floats(0.1, 2), st.floats(0.1, 3))
def test_intensity_decays_between_events_and_jumps_by_alpha(ts, a, b):
    ts = sorted(set(ts))
    m = hawkes(0.4, a, b, (0, 20))
    hist = ev(*ts)
    t = ts[-1]
    before = hawkes_intensity(m, t, hist, "0")
    just_after = hawkes_intensity(m, t + 1e-9, hist, "0")
    assert just_after - before == pytest.approx(a, abs=1e-6)
    later = [hawkes_intensity(m, t + d, hist, "0") for d in (0.1, 0.5, 1.0, 5.0)]
    assert all(x >= y for x, y in zip(later, later[1:]))


def test_simulate_homogeneous_count():
    n = len(pp_simulate(homogeneous(2.0, (0, 1000)), seed=3))
    assert abs(n - 2000) <= 3 * math.sqrt(2000)


def test_simulate_zero_rate():
    assert pp_simulate(inhom_poisson([0, 50, 100], [0.0, 0.0]), seed=1) == []


def test_simulate_deterministic_and_in_window():
    m = hawkes(0.5, 0.4, 1.0, (10, 300))
    a, b = pp_simulate(m, 7), pp_simulate(m, 7)
    assert a == b
    assert all(10 <= e.t <= 300 for e in a)
    assert [e.t for e in a] == sorted(e.t for e in a)


def test_simulate_rejects_unstable():
    with pytest.raises(PointProcessError):
        pp_simulate(hawkes(0.5, 1.5, 1.0, (0, 10)), 0)


def test_simulate_inhomogeneous_respects_bins():
    m = inhom_poisson([0, 500, 1000], [0.0, 3.0])
    evs = pp_simulate(m, 2)
    assert evs and all(e.t >= 500 for e in evs)


def test_fit_homogeneous_matches_mle():
    evs = pp_simulate(homogeneous(2.0, (0, 1000)), seed=1)
    res = pp_fit(evs, "homogeneous", (0, 1000))
    assert res.converged
    assert res.model.baseline[0][0] == pytest.approx(len(evs) / 1000, abs=1e-6)


def test_fit_inhom_per_bin_mle():
    evs = pp_simulate(inhom_poisson([0, 400, 1000], [1.0, 0.25]), seed=4)
    res = pp_fit(evs, "inhom_poisson", (0, 1000), breaks=[0, 400, 1000])
    n1 = sum(e.t < 400 for e in evs)
    n2 = len(evs) - n1
    assert res.model.baseline[0][0] == pytest.approx(n1 / 400, abs=1e-6)
    assert res.model.baseline[0][1] == pytest.approx(n2 / 600, abs=1e-6)


def test_fit_needs_ten_events():
    with pytest.raises(PointProcessError):
        pp_fit(ev(1, 2, 3), "hawkes", (0, 10))


def test_fit_iteration_cap_flags_nonconvergence():
    evs = pp_simulate(hawkes(0.5, 0.8, 1.2, (0, 400)), seed=2)
    res = pp_fit(evs, "hawkes", (0, 400), max_iter=1)
    assert not res.converged and res.iterations == 1
    assert res.loglik >= res.history[0]


def test_multivariate_fit_recovers_structure():
    m = multivariate_hawkes([0.4, 0.2], [[0.3, 0.4], [0.0, 0.3]], 1.0, (0, 4000), ["A", "B"])
    evs = pp_simulate(m, 3)
    res = pp_fit(evs, "multivariate_hawkes", (0, 4000), blocks=["A", "B"])
    a = np.asarray(res.model.alpha)
    assert a[0, 1] > a[1, 0]
    assert res.loglik >= pp_loglik(m, evs) - 1e-6


def test_likelihood_prefers_truth_over_doubled_parameters():
    wins = 0
    for seed in range(100):
        truth = hawkes(0.5, 0.4, 1.2, (0, 200))
        evs = pp_simulate(truth, seed)
        doubled = hawkes(1.0, 0.8, 2.4, (0, 200))
        wins += pp_loglik(truth, evs) > pp_loglik(doubled, evs)
    assert wins >= 95


def test_event_csv_and_model_dict_round_trip():
    evs = pp_simulate(multivariate_hawkes([0.2, 0.3], [[0.1, 0.1], [0.2, 0.0]], 1.0,
                                          (0, 100), ["A", "B"]), 1)
    assert parse_events_csv(events_to_csv(evs)) == evs
    m = hawkes([0.5, 0.2], 0.3, 1.1, (0, 10), breaks=[0, 5, 10])
    assert model_from_dict(model_to_dict(m)) == m
