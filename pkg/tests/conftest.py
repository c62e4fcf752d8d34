import numpy as np
import pytest

from roadtte import synthetic as syn
from roadtte.matcher import attribute_trip, build_index
from roadtte.trips import attach_distances, parse_beijing_record


def make_world(kind="grid", **overrides):
    """Network plus attributed trips with both distance series attached."""
    cfg = syn.preset(kind, **overrides)
    net = syn.grid_network(cfg)
    recs = syn.synthetic_trips(net, cfg)
    trips = [parse_beijing_record(r, r["tripID"]) for r in recs]
    idx = build_index(net)
    mapped = [attribute_trip(idx, net, t) for t in trips]
    attach_distances(mapped, net)
    return cfg, net, recs, mapped


@pytest.fixture(scope="session")
def small_world():
    return make_world("grid", rows=6, cols=6, n_trips=40, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import summary_lines

    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
