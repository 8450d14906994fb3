from dataclasses import replace

import numpy as np
import pytest

from amod_dispatch import agents as ag
from amod_dispatch import baselines as bl
from amod_dispatch import demand as dm
from amod_dispatch import experiments as ex
from amod_dispatch.world import (REJECT, EpisodeConfig, PricingModel, Vehicle, ZoneGraph, action_violation, commitment,
                                 deterministic_service_profit, initial_state, make_request, requests_from_pairs,
                                 run_episode)

from conftest import random_state

PRICES = PricingModel()


# --------------------------------------------------------------------------
# greedy


def test_greedy_rejects_unreachable(line5):
    s = initial_state([Vehicle(0)], requests_from_pairs(ZoneGraph.line(8), [(7, 6)], 0))
    assert bl.greedy_act(s, ZoneGraph.line(8), PRICES, 5) == [REJECT]


def test_greedy_picks_closer_vehicle():
    # a 19 km trip stays profitable after 1 or 2 km of deadhead
    g = ZoneGraph.line(22)
    s = initial_state([Vehicle(0), Vehicle(3)], requests_from_pairs(g, [(2, 21)], 0))
    assert bl.greedy_act(s, g, PRICES, 5) == [1]
    # tie on distance: lowest index
    s = initial_state([Vehicle(3), Vehicle(1)], requests_from_pairs(g, [(2, 21)], 0))
    assert bl.greedy_act(s, g, PRICES, 5) == [0]


def test_greedy_rejects_unprofitable(line5):
    # 1 km deadhead for a 1 km trip: 5 - 9 = -4
    s = initial_state([Vehicle(0)], requests_from_pairs(line5, [(1, 2)], 0))
    assert deterministic_service_profit(s.fleet[0], s.requests[0], line5, PRICES, 5)[0] == pytest.approx(-4.0)
    assert bl.greedy_act(s, line5, PRICES, 5) == [REJECT]


def test_greedy_one_request_per_vehicle_and_arrival_order(line5):
    s = initial_state([Vehicle(0)], requests_from_pairs(line5, [(0, 1), (0, 4)], 0))
    assert bl.greedy_act(s, line5, PRICES, 5) == [0, REJECT]


def test_greedy_properties(line5, rng):
    for _ in range(300):
        s = random_state(line5, rng, busy=0.6)
        a = bl.greedy_act(s, line5, PRICES, 5)
        assert action_violation(s, a) is None
        for i, j in enumerate(a):
            if j != REJECT:
                assert deterministic_service_profit(s.fleet[j], s.requests[i], line5, PRICES, 5)[0] > 0


# --------------------------------------------------------------------------
# virtual requests


def test_virtual_request_sampling():
    d = dm.synthetic_distribution(3, 1, 30.0, np.random.default_rng(0), interval_steps=5)
    assert bl.sample_virtual_requests(d, 0, 0, np.random.default_rng(0)) == []
    zero = dm.ODDistribution(3, 5, d.probs, [0.0])
    assert bl.sample_virtual_requests(zero, 0, 4, np.random.default_rng(0)) == []
    a = bl.sample_virtual_requests(d, 0, 4, np.random.default_rng(7))
    b = bl.sample_virtual_requests(d, 0, 4, np.random.default_rng(7))
    assert a == b and len(a) > 0 and all(1 <= k <= 4 for k, _, _ in a)


# --------------------------------------------------------------------------
# offline instance and solver


def test_instance_examples(line5):
    s = initial_state([Vehicle(0), Vehicle(3)])
    inst = bl.build_offline_instance(s, [], line5, PRICES, 5)
    assert [len(p) for p in inst.schedules] == [1, 1]
    s = initial_state([Vehicle(0)], requests_from_pairs(line5, [(0, 2)], 0))
    inst = bl.build_offline_instance(s, [], line5, PRICES, 5)
    assert [sc.requests for sc in inst.schedules[0]] == [(), (0,)]
    assert inst.schedules[0][1].profit == pytest.approx(1.0)


def test_schedule_profit_is_chained_service_profit(line5, rng):
    for _ in range(30):
        s = random_state(line5, rng, n_vehicles=2, n_requests=3, busy=0.3)
        virtual = [(int(rng.integers(1, 3)), *[int(x) for x in rng.choice(5, 2, replace=False)]) for _ in range(2)]
        inst = bl.build_offline_instance(s, virtual, line5, PRICES, 5, cap=2)
        for j, pool in enumerate(inst.schedules):
            for sc in pool:
                veh, total = s.fleet[j], 0.0
                # replay the schedule request by request, waiting for arrivals
                com = commitment(veh, line5)
                end, free = com.end_node, com.free_in
                for key in sc.requests:
                    pr = inst.requests[key]
                    pickup = max(pr.arrival, free) + int(line5.travel_time[end, pr.origin])
                    assert pr.wait0 + pickup - pr.arrival <= 5
                    req = replace(make_request(line5, 0, pr.origin, pr.destination, 0), wait=pr.wait0)
                    p, _ = deterministic_service_profit(Vehicle(end), req, line5, PRICES, 5)
                    total += p
                    free = pickup + int(line5.travel_time[pr.origin, pr.destination])
                    end = pr.destination
                assert sc.profit == pytest.approx(total)


def test_pool_guard(line5):
    s = initial_state([Vehicle(0)] * 3, requests_from_pairs(line5, [(0, 1), (1, 2), (2, 3), (3, 4)], 0))
    with pytest.raises(bl.PoolSizeError):
        bl.build_offline_instance(s, [], line5, PRICES, 5, cap=3, max_pool=5)


def test_solver_examples(line5):
    s = initial_state([Vehicle(0)], requests_from_pairs(line5, [(0, 2), (0, 4)], 0))
    sol = bl.solve_offline(bl.build_offline_instance(s, [], line5, PRICES, 5))
    assert sol.objective == pytest.approx(2.0) and sol.optimal
    s = initial_state([Vehicle(0), Vehicle(1)], requests_from_pairs(line5, [(0, 3)], 0))
    inst = bl.build_offline_instance(s, [], line5, PRICES, 5)
    sol = bl.solve_offline(inst)
    assert [c.requests for c in sol.chosen] == [(0,), ()]
    assert sol.objective == pytest.approx(1.5)


@pytest.mark.parametrize("seed", range(500))
def test_solver_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    g = ZoneGraph.line(5)
    s = random_state(g, rng, n_vehicles=int(rng.integers(1, 4)), n_requests=int(rng.integers(0, 3)), busy=0.3)
    virtual = [(int(rng.integers(1, 3)), *[int(x) for x in rng.choice(5, 2, replace=False)])
               for _ in range(int(rng.integers(0, 3)))]
    inst = bl.build_offline_instance(s, virtual, g, PRICES, 5, cap=3)
    sol = bl.solve_offline(inst)
    assert sol.optimal and sol.objective == pytest.approx(bl.brute_force_offline(inst), abs=1e-12)
    assert sol.gap == 0.0


def test_node_budget_reports_gap():
    rng = np.random.default_rng(0)
    g = ZoneGraph.line(5)
    s = random_state(g, rng, n_vehicles=4, n_requests=4, busy=0.0)
    virtual = [(1, 0, 4), (1, 4, 0), (2, 1, 3), (2, 3, 1)]
    inst = bl.build_offline_instance(s, virtual, g, PRICES, 5)
    sol = bl.solve_offline(inst, node_budget=3)
    assert not sol.optimal and sol.bound >= sol.objective
    assert sol.objective <= bl.solve_offline(inst).objective


def test_dp_oracle_matches_schedule_enumeration():
    for seed in range(15):
        rng = np.random.default_rng(seed)
        g = ZoneGraph.line(5)
        steps = [[tuple(int(x) for x in rng.choice(5, 2, replace=False)) for _ in range(int(rng.integers(0, 2)))]
                 for _ in range(4)]
        fleet = (Vehicle(int(rng.integers(5))), Vehicle(int(rng.integers(5))))
        virtual = [(t, o, d) for t in range(1, 4) for o, d in steps[t]]
        s = initial_state(fleet, requests_from_pairs(g, steps[0], 0))
        inst = bl.build_offline_instance(s, virtual, g, PRICES, 5, cap=6)
        assert bl.exact_offline_value(fleet, steps, g, PRICES, 5) == pytest.approx(bl.solve_offline(inst).objective)


# --------------------------------------------------------------------------
# MPC


def test_mpc_without_virtual_requests_is_myopic(line5):
    s = initial_state([Vehicle(0), Vehicle(4)], requests_from_pairs(line5, [(0, 2), (4, 1)], 0))
    a = bl.mpc_act(s, line5, PRICES, 5, bl.MpcConfig(), [])
    assert a == [0, 1]


def test_perfect_information_mpc_beats_greedy_on_crafted_instance():
    g = ZoneGraph.line(7)
    steps = [[(0, 1)], [(0, 6)]] + [[] for _ in range(10)]
    cfg = EpisodeConfig(horizon=12, max_wait=5, fleet_size=1)
    fleet = (Vehicle(0),)
    greedy = run_episode(bl.greedy_policy(g, PRICES, 5), steps, g, PRICES, cfg, fleet).profit
    mpc = bl.MpcPolicy(g, PRICES, 5, bl.MpcConfig(horizon=12, cap=12), future=steps)
    first = mpc(initial_state(fleet, requests_from_pairs(g, steps[0], 0)))
    assert first == [REJECT]
    perfect = run_episode(mpc, steps, g, PRICES, cfg, fleet).profit
    assert greedy == pytest.approx(0.5)
    assert perfect == pytest.approx(3.0) and perfect > greedy


def test_mpc_is_deterministic_and_valid(rng):
    g = ZoneGraph.line(5)
    d = dm.synthetic_distribution(5, 1, 10.0, np.random.default_rng(1))
    for _ in range(30):
        s = random_state(g, rng, busy=0.5)
        acts = [bl.MpcPolicy(g, PRICES, 5, bl.MpcConfig(horizon=2, cap=2), dist=d, seed=4)(s) for _ in range(2)]
        assert acts[0] == acts[1]
        assert action_violation(s, acts[0]) is None


def test_mpc_policy_needs_information():
    with pytest.raises(ValueError):
        bl.MpcPolicy(ZoneGraph.line(3), PRICES, 5, bl.MpcConfig())


def test_perfect_mpc_weakly_beats_greedy_on_small_suite():
    spec = ex.SmallWorldSpec(n_episodes=8)
    scenario, _ = ex.small_world_suite(spec, seed=11)
    cfg = ex.perfect_mpc_config(spec)
    for ep in scenario.test:
        greedy = run_episode(bl.greedy_policy(scenario.graph, PRICES, spec.max_wait), ep.steps, scenario.graph,
                             PRICES, scenario.episode, ep.fleet).profit
        mpc = bl.MpcPolicy(scenario.graph, PRICES, spec.max_wait, cfg, future=ep.steps)
        perfect = run_episode(mpc, ep.steps, scenario.graph, PRICES, scenario.episode, ep.fleet).profit
        assert perfect >= greedy - 1e-9


def test_bench_reports_pool_overflow_as_lower_bound():
    g = ex.hex_world(1)
    d = dm.synthetic_distribution(g.n_nodes, 1, 40.0, np.random.default_rng(0))
    params = ag.init_actor(ag.NetworkShape(4, 4, 4, (8, 4)), np.random.default_rng(0))
    ok = ex.bench_runtime(g, params, [3], 1.0, 2, d, bl.MpcConfig(horizon=2, cap=2), horizon=12)[0]
    assert ok["mpc_status"] == "ok" and ok["mpc_total_s"] > 0
    tight = bl.MpcConfig(horizon=2, cap=2, max_pool=2)
    row = ex.bench_runtime(g, params, [3], 1.0, 2, d, tight, horizon=12)[0]
    assert row["mpc_status"] == "pool_limit" and row["mpc_total_s"] > 0 and row["mpc_solve_s"] == 0.0
    skipped = ex.bench_runtime(g, params, [3], 1.0, 1, d, tight, horizon=12, run_mpc=lambda k: False)[0]
    assert skipped["mpc_status"] == "skipped"
