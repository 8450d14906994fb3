import numpy as np
import pytest

from amod_dispatch import agents as ag
from amod_dispatch.world import (EpisodeConfig, PricingModel, SystemState, Vehicle, ZoneGraph, make_request)


@pytest.fixture
def line5():
    return ZoneGraph.line(5)


@pytest.fixture
def prices():
    return PricingModel()


def small_shape():
    return ag.NetworkShape(embed=8, request_attention=16, vehicle_attention=16, trunk=(16, 8))


def random_state(graph: ZoneGraph, rng, n_vehicles=None, n_requests=None, t=0, busy=0.5):
    """Random mid-episode state with partially loaded vehicles."""
    n = graph.n_nodes
    K = n_vehicles if n_vehicles is not None else int(rng.integers(1, 5))
    R = n_requests if n_requests is not None else int(rng.integers(0, 5))

    def trip(rid, wait):
        o, d = (int(x) for x in rng.choice(n, 2, replace=False))
        req = make_request(graph, rid, o, d, 0)
        return req if wait == 0 else _with_wait(req, wait)

    fleet, rid = [], 1000
    for _ in range(K):
        pos = int(rng.integers(n))
        if rng.random() >= busy:
            fleet.append(Vehicle(pos))
            continue
        r1 = trip(rid, int(rng.integers(0, 3)))
        if rng.random() < 0.5 and r1.origin == pos:
            r1 = _with_wait(r1, None)
        r2 = trip(rid + 1, int(rng.integers(0, 3))) if rng.random() < 0.4 else None
        rid += 2
        fleet.append(Vehicle(pos, 0, r1, r2))
    reqs = tuple(make_request(graph, k, *[int(x) for x in rng.choice(n, 2, replace=False)], t)
                 for k in range(R))
    return SystemState(t, reqs, tuple(fleet), R)


def _with_wait(req, wait):
    from dataclasses import replace
    return replace(req, wait=wait)


@pytest.fixture
def episode_config():
    return EpisodeConfig(horizon=12, max_wait=5, fleet_size=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
