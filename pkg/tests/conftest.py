import json
import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def net_doc(nodes, edges, connections=(), signals=(), tazs=()):
    """Build a network JSON string from compact tuples.

    Args:
        nodes: (id, x, y) triples.
        edges: dicts merged over a residential one-lane default.
    """
    doc = {
        "nodes": [{"id": n, "x": x, "y": y} for n, x, y in nodes],
        "edges": [dict({"lanes": 1, "type": "residential", "priority": 1,
                        "speed_limit_mps": 13.89, "lane_change": True}, **e) for e in edges],
        "connections": [dict({"from_lane": 0, "to_lane": 0, "yield": False}, **c)
                        for c in connections],
        "signals": list(signals),
        "tazs": list(tazs),
    }
    return json.dumps(doc, indent=1)


@pytest.fixture
def minimal_text():
    return net_doc([("A", 0, 0), ("B", 100, 0)],
                   [{"id": "e", "from": "A", "to": "B", "length_m": 100}])


_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request, capsys):
    """Record one PASS/FAIL line per acceptance criterion and return the outcome."""
    def record(number, name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} [{number}] {name}" + (f": {detail}" if detail else "")
        request.config.stash[_VERDICTS].append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return record
