import heapq
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amod_dispatch import baselines as bl
from amod_dispatch.world import (REJECT, ActionShapeError, EpisodeConfig, InvalidActionError, PricingModel,
                                 SystemState, Vehicle, ZoneGraph, action_violation, advance_dynamics,
                                 apply_assignments, can_serve_within_deadline, commitment,
                                 deterministic_service_profit, initial_state, make_request,
                                 requests_from_pairs, run_episode, run_out, step, step_profit,
                                 validate_action)

from conftest import random_state


def grid_graph(rows=3, cols=3, dist=0.5, steps=2):
    coords = [(c, r) for r in range(rows) for c in range(cols)]
    edges = []
    for r in range(rows):
        for c in range(cols):
            k = r * cols + c
            if c + 1 < cols:
                edges.append((k, k + 1, dist, steps))
            if r + 1 < rows:
                edges.append((k, k + cols, dist, steps))
    return ZoneGraph(coords, edges)


# --------------------------------------------------------------------------
# graph


def test_graph_rejects_bad_edges():
    with pytest.raises(ValueError):
        ZoneGraph([(0, 0), (1, 0)], [(0, 1, 0.0, 1)])
    with pytest.raises(ValueError):
        ZoneGraph([(0, 0), (1, 0)], [(0, 1, 1.0, 0)])
    with pytest.raises(ValueError):
        ZoneGraph([(0, 0), (1, 0), (2, 0)], [(0, 1, 1.0, 1)])  # disconnected


def test_graph_tables_match_independent_dijkstra():
    rng = np.random.default_rng(3)
    n = 9
    coords = rng.random((n, 2))
    edges = [(i, i + 1, float(rng.uniform(0.2, 2)), int(rng.integers(1, 4))) for i in range(n - 1)]
    edges += [(int(a), int(b), float(rng.uniform(0.2, 2)), int(rng.integers(1, 4)))
              for a, b in rng.integers(0, n, (8, 2)) if a != b]
    g = ZoneGraph(coords, edges)

    def dijkstra(src, weight):
        best = {src: 0.0}
        heap = [(0.0, src)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > best[u]:
                continue
            for v in g.neighbors[u]:
                nd = d + weight(u, v)
                if nd < best.get(v, np.inf):
                    best[v] = nd
                    heapq.heappush(heap, (nd, v))
        return best

    for s in range(n):
        dist = dijkstra(s, lambda u, v: g.edge_distance[(u, v)])
        time = dijkstra(s, lambda u, v: g.edge_time[(u, v)])
        for v in range(n):
            assert g.shortest_distance[s, v] == pytest.approx(dist[v])
            assert g.travel_time[s, v] == time[v]
            # route is a fastest path
            if v != s:
                hop = g.next_hop[s, v]
                assert g.edge_time[(s, hop)] + g.travel_time[hop, v] == g.travel_time[s, v]
    # triangle inequality
    T = g.travel_time
    assert np.all(T[:, None, :] <= T[:, :, None] + T[None, :, :])


def test_route_tie_break_prefers_shorter_then_lower_index():
    # two equally fast paths 0-1-3 and 0-2-3; the second is shorter
    g = ZoneGraph([(0, 0), (1, 1), (1, -1), (2, 0)],
                  [(0, 1, 1.0, 1), (1, 3, 1.0, 1), (0, 2, 0.5, 1), (2, 3, 0.5, 1)])
    assert g.route(0, 3) == [0, 2, 3]
    # identical paths: lowest next-node index wins
    h = ZoneGraph([(0, 0), (1, 1), (1, -1), (2, 0)],
                  [(0, 1, 1.0, 1), (1, 3, 1.0, 1), (0, 2, 1.0, 1), (2, 3, 1.0, 1)])
    assert h.route(0, 3) == [0, 1, 3]


def test_graph_json_round_trip(tmp_path):
    g = grid_graph()
    g.save(tmp_path / "g.json")
    h = ZoneGraph.load(tmp_path / "g.json")
    assert np.array_equal(g.travel_time, h.travel_time)
    assert np.array_equal(g.route_distance, h.route_distance)
    doc = {"nodes": [{"id": "a", "x": 0, "y": 0}, {"id": "b", "x": 1, "y": 0}],
           "edges": [{"u": "a", "v": "b", "distance_km": 0.917, "time_steps": 5}]}
    k = ZoneGraph.from_dict(json.loads(json.dumps(doc)))
    assert k.travel_time[0, 1] == 5 and k.travel_time[1, 0] == 5


# --------------------------------------------------------------------------
# actions


def test_validate_action_examples(line5):
    empty = initial_state([Vehicle(0)])
    validate_action(empty, [])
    r = requests_from_pairs(line5, [(0, 1), (1, 2)], 0)
    a, b = make_request(line5, 90, 0, 2, 0), make_request(line5, 91, 2, 3, 0)
    full = Vehicle(0, 0, a, b)
    state = initial_state([full, Vehicle(1)], r)
    assert "slot occupied" in action_violation(state, [0, REJECT])
    assert "multiply assigned" in action_violation(state, [1, 1])
    with pytest.raises(InvalidActionError):
        validate_action(state, [1, 1])
    with pytest.raises(ActionShapeError):
        validate_action(state, [1])
    assert action_violation(state, [1, REJECT]) is None


def test_apply_assignments_examples(line5):
    reqs = requests_from_pairs(line5, [(0, 1), (2, 3)], 0)
    other = make_request(line5, 50, 3, 4, 0)
    state = initial_state([Vehicle(0), Vehicle(3, 0, other)], reqs)
    post = apply_assignments(state, [REJECT, REJECT])
    assert post.fleet == state.fleet and post.requests == ()
    post = apply_assignments(state, [0, 1])
    assert post.fleet[0].r1 == reqs[0]
    assert post.fleet[1].r1 == other and post.fleet[1].r2 == reqs[1]
    with pytest.raises(InvalidActionError):
        apply_assignments(state, [0, 0])


# --------------------------------------------------------------------------
# rewards and dynamics


def test_step_profit_examples(prices):
    # one 0.459 km edge from the origin, trip of exactly 1 km on a two-edge route
    g = ZoneGraph([(0, 0), (1, 0), (2, 0)], [(0, 1, 0.459, 2), (1, 2, 0.541, 2)])
    req = replace(make_request(g, 0, 0, 2, 0), wait=3)
    post = SystemState(3, (), (Vehicle(0, 0, req),))
    out = step_profit(post, g, prices, 5)
    assert out.revenue == pytest.approx(5.00)
    assert out.cost == pytest.approx(4.50 * 0.459)
    late = SystemState(6, (), (Vehicle(0, 0, replace(req, wait=6)),))
    out = step_profit(late, g, prices, 5)
    assert out.revenue == 0.0 and out.cost == pytest.approx(4.50 * 0.459)
    idle = SystemState(0, (), (Vehicle(1), Vehicle(0, 1, req)))
    out = step_profit(idle, g, prices, 5)
    assert out.revenue == 0.0 and out.cost == 0.0


def test_advance_dynamics_examples(line5):
    g = line5
    idle = SystemState(4, (), (Vehicle(2),))
    nxt = advance_dynamics(idle, (), g)
    assert nxt.fleet == idle.fleet and nxt.t == 5
    slow = ZoneGraph.line(5, time_steps=3)
    r = make_request(slow, 0, 0, 4, 0)
    moving = SystemState(0, (), (Vehicle(1, 2, replace(r, wait=None)),))
    nxt = advance_dynamics(moving, (), slow)
    assert nxt.fleet[0] == Vehicle(1, 1, replace(r, wait=None))
    # at the destination of a picked-up r1 with r2 waiting: shift
    r1 = replace(make_request(g, 1, 0, 3, 0), wait=None)
    r2 = replace(make_request(g, 2, 4, 1, 0), wait=2)
    at_dest = SystemState(0, (), (Vehicle(3, 0, r1, r2),))
    nxt = advance_dynamics(at_dest, (), g)
    veh = nxt.fleet[0]
    assert veh.r1.rid == 2 and veh.r2 is None
    # the new r1 keeps waiting
    assert veh.r1.wait == 3


def test_step_all_reject_forever_is_zero(line5, rng):
    cfg = EpisodeConfig(horizon=10, max_wait=5, fleet_size=2)
    steps = [[(0, 3)], [], [(4, 1), (2, 0)]] + [[] for _ in range(7)]
    res = run_episode(lambda s: [REJECT] * s.n_requests, steps, line5, PricingModel(), cfg,
                      (Vehicle(0), Vehicle(4)))
    assert res.profit == 0.0


@pytest.mark.parametrize("D", [1, 2, 4])
def test_colocated_service_profit(line5, prices, D):
    cfg = EpisodeConfig(horizon=8, max_wait=5, fleet_size=1)
    steps = [[(0, D)]] + [[] for _ in range(7)]
    res = run_episode(lambda s: [0] * s.n_requests, steps, line5, prices, cfg, (Vehicle(0),))
    assert res.profit == pytest.approx(0.5 * D)


def test_scripted_three_step_episode_golden(prices):
    # 0 --1km/1-- 1 --2km/2-- 2 ; vehicle at 1, request 0 -> 2 placed at t=0
    g = ZoneGraph([(0, 0), (1, 0), (3, 0)], [(0, 1, 1.0, 1), (1, 2, 2.0, 2)])
    cfg = EpisodeConfig(horizon=3, max_wait=5, fleet_size=1)
    reqs = requests_from_pairs(g, [(0, 2)], 0)
    s0 = initial_state([Vehicle(1)], reqs)
    # t=0: assign; the vehicle starts the deadhead edge 1->0 (1 km)
    r0, s1, out0 = step(s0, [0], (), g, prices, cfg)
    assert r0 == pytest.approx(-4.5)
    assert s1.fleet[0].position == 0 and s1.fleet[0].tau == 0 and s1.fleet[0].r1.wait == 1
    # t=1: pickup at 0 with wait 1 (revenue 3 km * 5) and move 0->1 (1 km)
    r1, s2, out1 = step(s1, [], (), g, prices, cfg)
    assert r1 == pytest.approx(15.0 - 4.5)
    assert s2.fleet[0].r1.wait is None and s2.fleet[0].position == 1
    # t=2: start the 2 km edge 1->2
    r2, s3, _ = step(s2, [], (), g, prices, cfg)
    assert r2 == pytest.approx(-9.0)
    assert s3.fleet[0].tau == 1
    # run-out: one step to arrive, no extra cost
    assert run_out(s3, g, prices, 5) == 0.0
    assert r0 + r1 + r2 == pytest.approx(15.0 - 4.5 * 4)


def test_run_out_examples(prices):
    g = ZoneGraph.line(5)
    assert run_out(SystemState(10, (), (Vehicle(0), Vehicle(3))), g, prices, 5) == 0.0
    # in-flight trip, 2 km remaining to destination, already picked up
    rin = replace(make_request(g, 0, 0, 4, 0), wait=None)
    st = SystemState(10, (), (Vehicle(2, 0, rin),))
    assert run_out(st, g, prices, 5) == pytest.approx(-4.5 * 2)
    # assigned but not picked up, feasible: full deterministic service profit
    r = replace(make_request(g, 1, 1, 3, 0), wait=1)
    veh = Vehicle(0, 0, r)
    st = SystemState(10, (), (veh,))
    # same trip offered to an idle twin at the same place
    twin, _ = deterministic_service_profit(Vehicle(0), r, g, prices, 5)
    assert run_out(st, g, prices, 5) == pytest.approx(twin)
    assert twin == pytest.approx(5 * 2 - 4.5 * 3)


def test_can_serve_within_deadline_examples():
    g = ZoneGraph.line(6, time_steps=2)
    req = make_request(g, 0, 3, 5, 0)
    assert can_serve_within_deadline(Vehicle(3), req, g, 5)
    assert not can_serve_within_deadline(Vehicle(0), req, g, 5)  # 6 > 5
    # busy: finishes r1 in 2 steps at node 2, then 2 steps to node 3; wait 1 -> 1 + 4 <= 5
    cur = replace(make_request(g, 1, 1, 2, 0), wait=None)
    busy = Vehicle(2, 2, cur)
    assert commitment(busy, g).free_in == 2
    assert can_serve_within_deadline(busy, replace(req, wait=1), g, 5)
    assert not can_serve_within_deadline(busy, replace(req, wait=2), g, 5)


def test_deterministic_service_profit_examples(prices):
    g = ZoneGraph.line(4)
    assert deterministic_service_profit(Vehicle(0), make_request(g, 0, 0, 2, 0), g, prices, 5) == \
        (pytest.approx(1.0), 0)
    p, w = deterministic_service_profit(Vehicle(0), make_request(g, 0, 1, 2, 0), g, prices, 5)
    assert p == pytest.approx(-4.0) and w == 1
    late = replace(make_request(g, 0, 1, 2, 0), wait=5)
    p, w = deterministic_service_profit(Vehicle(0), late, g, prices, 5)
    assert w == 6 and p == pytest.approx(-9.0)


# --------------------------------------------------------------------------
# invariants over random rollouts


def _random_policy(rng):
    def act(state):
        out, used = [], set()
        for _ in state.requests:
            free = [j for j, v in enumerate(state.fleet) if v.r2 is None and j not in used]
            if free and rng.random() < 0.6:
                j = int(rng.choice(free))
                used.add(j)
                out.append(j)
            else:
                out.append(REJECT)
        return out
    return act


def test_random_rollout_invariants():
    g = grid_graph()
    rng = np.random.default_rng(8)
    cfg = EpisodeConfig(horizon=25, max_wait=5, fleet_size=3)
    act = _random_policy(rng)
    for ep in range(20):
        state = initial_state([Vehicle(int(p)) for p in rng.integers(0, 9, 3)],
                              requests_from_pairs(g, [(0, 8)], 0))
        picked = set()
        rid = 100
        for t in range(cfg.horizon):
            pairs = [tuple(int(x) for x in rng.choice(9, 2, replace=False)) for _ in range(rng.poisson(1.2))]
            incoming = requests_from_pairs(g, pairs, t + 1, rid)
            rid += len(pairs)
            post = apply_assignments(state, act(state))
            if not any(v.tau == 0 and v.r1 is not None for v in post.fleet):
                out = step_profit(post, g, PricingModel(), 5)
                assert out.revenue == 0.0 and out.cost == 0.0
            state = advance_dynamics(post, incoming, g)
            for v in state.fleet:
                assert 0 <= v.position < g.n_nodes
                assert v.r2 is None or v.r1 is not None
                assert v.tau >= 0
                for r in (v.r1, v.r2):
                    if r is None:
                        continue
                    if r.wait is None:
                        picked.add(r.rid)
                    else:
                        assert r.rid not in picked


def test_step_is_deterministic(rng):
    g = grid_graph()
    st = random_state(g, rng, 3, 3)
    act = bl.greedy_act(st, g, PricingModel(), 5)
    inc = requests_from_pairs(g, [(1, 2)], 1, 77)
    a = step(st, act, inc, g, PricingModel(), EpisodeConfig(10, 5, 3))
    b = step(st, act, inc, g, PricingModel(), EpisodeConfig(10, 5, 3))
    assert a[0] == b[0] and a[1] == b[1]


def _ledger_replay(policy, steps, g, prices, cfg, fleet):
    """Independent accounting: revenue booked at pickups, cost per traversed edge."""
    res = run_episode(policy, steps, g, prices, cfg, fleet, keep_actions=True)
    rid, batches = 0, []
    for t in range(cfg.horizon):
        pairs = steps[t] if t < len(steps) else ()
        batches.append(requests_from_pairs(g, pairs, t, rid))
        rid += len(pairs)
    state = initial_state(fleet, batches[0])
    revenue = cost = 0.0
    t = 0
    while True:
        post = apply_assignments(state, res.actions[t] if t < cfg.horizon else [])
        for v in post.fleet:
            if v.r1 is None or v.tau:
                continue
            if v.r1.wait is not None and v.position == v.r1.origin and v.r1.wait <= cfg.max_wait:
                revenue += prices.revenue_per_km * v.r1.trip_distance
        nxt = advance_dynamics(post, batches[t + 1] if t + 1 < cfg.horizon else (), g)
        for a, b in zip(post.fleet, nxt.fleet):
            if a.tau == 0 and b.position != a.position:
                cost += prices.cost_per_km * g.edge_distance[(a.position, b.position)]
        state = nxt
        t += 1
        if t >= cfg.horizon and not any(v.r1 is not None for v in state.fleet):
            break
    return res.profit, revenue - cost


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_conservation_against_event_ledger(seed):
    g = grid_graph()
    rng = np.random.default_rng(seed)
    cfg = EpisodeConfig(horizon=15, max_wait=5, fleet_size=2)
    steps = [[tuple(int(x) for x in rng.choice(9, 2, replace=False)) for _ in range(rng.poisson(1.0))]
             for _ in range(cfg.horizon)]
    fleet = tuple(Vehicle(int(p)) for p in rng.integers(0, 9, 2))
    env, ledger = _ledger_replay(_random_policy(rng), steps, g, PricingModel(), cfg, fleet)
    assert env == pytest.approx(ledger, abs=1e-9)
