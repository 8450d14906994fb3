"""Benchmark dispatch policies: greedy nearest-vehicle and sampling MPC.

The MPC plans over candidate schedules.  A schedule is an ordered list of
at most ``cap`` requests a vehicle serves after its current jobs; requests
in a schedule have strictly increasing arrival steps, so at most one new
request per vehicle and step is planned, as in the action constraints.
Choosing one schedule per vehicle with every request covered at most once
is a set-packing problem, solved exactly by depth-first branch-and-bound.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .demand import ODDistribution
from .world import REJECT, PricingModel, SystemState, ZoneGraph, commitment


# --------------------------------------------------------------------------
# greedy


def _fleet_arrays(state: SystemState, graph: ZoneGraph):
    commits = [commitment(v, graph) for v in state.fleet]
    ends = np.array([c.end_node for c in commits], dtype=np.int64)
    free = np.array([c.free_in for c in commits], dtype=np.int64)
    full = np.array([v.full for v in state.fleet], dtype=bool)
    return ends, free, full


def greedy_act(state: SystemState, graph: ZoneGraph, prices: PricingModel, max_wait: int) -> list:
    """Serve requests in arrival order with the closest eligible vehicle.

    A vehicle is eligible if it has a free slot, has not received a request
    this step, meets the deadline and earns a positive deterministic profit.
    """
    if state.n_requests == 0:
        return []
    ends, free, full = _fleet_arrays(state, graph)
    used = full.copy()
    action = []
    for req in state.requests:
        o, d = req.origin, req.destination
        wait = req.wait + free + graph.travel_time[ends, o]
        revenue = np.where(wait <= max_wait, prices.revenue_per_km * req.trip_distance, 0.0)
        profit = revenue - prices.cost_per_km * (graph.route_distance[ends, o] + graph.route_distance[o, d])
        ok = (~used) & (wait <= max_wait) & (profit > 0)
        if not ok.any():
            action.append(REJECT)
            continue
        dist = np.where(ok, graph.shortest_distance[ends, o], np.inf)
        j = int(np.argmin(dist))  # first minimum = lowest index
        used[j] = True
        action.append(j)
    return action


# --------------------------------------------------------------------------
# MPC configuration and virtual requests


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 5
    cap: int = 3
    node_budget: int = 2_000_000
    time_budget: Optional[float] = None  # seconds per solve
    max_pool: int = 5_000_000
    count_mode: str = "poisson"


@dataclass(frozen=True)
class PlanRequest:
    key: int
    arrival: int   # steps after now (0 = real request)
    origin: int
    destination: int
    wait0: int     # waiting time already accumulated at arrival
    real: bool


def sample_virtual_requests(dist: ODDistribution, t: int, horizon: int, rng, mode: str = "poisson") -> list:
    """(arrival_offset, origin, destination) for steps t+1 .. t+horizon."""
    out = []
    if horizon <= 0:
        return out
    pairs = dist.pairs
    for k in range(1, horizon + 1):
        rate = dist.rate(t + k)
        n = int(rng.poisson(rate)) if mode == "poisson" else int(round(rate))
        if n == 0:
            continue
        for idx in rng.choice(len(pairs), size=n, p=dist.probs[dist.interval_of(t + k)]):
            o, d = pairs[idx]
            out.append((k, o, d))
    return out


# --------------------------------------------------------------------------
# offline instance


@dataclass(frozen=True)
class CandidateSchedule:
    vehicle: int
    requests: tuple       # plan request keys in service order
    profit: float
    waits: tuple


@dataclass
class OfflinePlanInstance:
    n_vehicles: int
    requests: list                   # PlanRequest
    schedules: list                  # per vehicle: list of CandidateSchedule (empty schedule first)
    build_seconds: float = 0.0

    @property
    def pool_size(self) -> int:
        return sum(len(s) for s in self.schedules)


class PoolSizeError(RuntimeError):
    pass


def build_offline_instance(state: SystemState, virtual: Sequence, graph: ZoneGraph, prices: PricingModel,
                           max_wait: int, cap: int = 3, max_pool: int = 5_000_000) -> OfflinePlanInstance:
    """Enumerate every feasible schedule of up to ``cap`` requests per vehicle."""
    start = time.perf_counter()
    reqs = [PlanRequest(i, 0, r.origin, r.destination, r.wait, True) for i, r in enumerate(state.requests)]
    base = len(reqs)
    for k, (a, o, d) in enumerate(sorted(virtual, key=lambda x: x[0])):
        reqs.append(PlanRequest(base + k, int(a), int(o), int(d), 0, False))
    n = len(reqs)
    arrival = np.array([r.arrival for r in reqs], dtype=np.int64)
    origin = np.array([r.origin for r in reqs], dtype=np.int64)
    dest = np.array([r.destination for r in reqs], dtype=np.int64)
    wait0 = np.array([r.wait0 for r in reqs], dtype=np.int64)
    trip_time = graph.travel_time[origin, dest] if n else np.zeros(0, np.int64)
    revenue = prices.revenue_per_km * graph.shortest_distance[origin, dest] if n else np.zeros(0)
    trip_cost = prices.cost_per_km * graph.route_distance[origin, dest] if n else np.zeros(0)
    c = prices.cost_per_km

    schedules = []
    pool = 0
    for j, veh in enumerate(state.fleet):
        com = commitment(veh, graph)
        own = [CandidateSchedule(j, (), 0.0, ())]
        if n:
            stack = [(com.end_node, com.free_in, tuple(com.drop_offsets), -1, (), 0.0, ())]
            while stack:
                end, free, held, last_arr, seq, profit, waits = stack.pop()
                if len(seq) >= cap:
                    continue
                idx = np.flatnonzero(arrival > last_arr)
                if len(idx) == 0:
                    continue
                a = arrival[idx]
                pickup = np.maximum(a, free) + graph.travel_time[end, origin[idx]]
                w = wait0[idx] + pickup - a
                held_arr = np.asarray(held, dtype=np.int64)
                slots = (held_arr[None, :] > a[:, None]).sum(axis=1) if len(held_arr) else np.zeros(len(idx), np.int64)
                ok = (w <= max_wait) & (slots <= 1)
                for m in np.flatnonzero(ok):
                    r = int(idx[m])
                    gain = revenue[r] - c * graph.route_distance[end, origin[r]] - trip_cost[r]
                    drop = int(pickup[m] + trip_time[r])
                    nseq = seq + (r,)
                    child = (int(dest[r]), drop, held + (drop,), int(a[m]), nseq, profit + gain, waits + (int(w[m]),))
                    own.append(CandidateSchedule(j, nseq, float(profit + gain), child[6]))
                    stack.append(child)
                if pool + len(own) > max_pool:
                    raise PoolSizeError(f"schedule pool exceeds {max_pool}; use a smaller cap or horizon")
            pool += len(own)
        else:
            pool += 1
        schedules.append(own)
    return OfflinePlanInstance(state.n_vehicles, reqs, schedules, time.perf_counter() - start)


# --------------------------------------------------------------------------
# exact set packing


@dataclass
class OfflineSolution:
    chosen: list          # per vehicle: CandidateSchedule
    objective: float
    bound: float
    nodes: int
    optimal: bool
    seconds: float

    @property
    def gap(self) -> float:
        return max(self.bound - self.objective, 0.0)


def _order(s: CandidateSchedule):
    return (-s.profit, s.requests)


def _components(instance: OfflinePlanInstance):
    """Vehicles linked through shared requests (union-find)."""
    parent = list(range(instance.n_vehicles))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    owner: dict = {}
    for j, pool in enumerate(instance.schedules):
        for s in pool:
            for r in s.requests:
                if r in owner:
                    a, b = find(owner[r]), find(j)
                    if a != b:
                        parent[max(a, b)] = min(a, b)
                else:
                    owner[r] = j
    groups: dict = {}
    for j in range(instance.n_vehicles):
        groups.setdefault(find(j), []).append(j)
    return list(groups.values())


def solve_offline(instance: OfflinePlanInstance, node_budget: int = 2_000_000,
                  time_budget: Optional[float] = None) -> OfflineSolution:
    """Maximise total schedule profit, one schedule per vehicle, requests used at most once.

    Depth-first over vehicles, schedules tried by decreasing profit; the
    bound adds every remaining vehicle's best schedule.  Ties keep the
    incumbent found first, which is the lexicographically smallest choice
    in this search order.
    """
    start = time.perf_counter()
    chosen: list = [None] * instance.n_vehicles
    total_obj = total_bound = 0.0
    nodes = 0
    optimal = True
    for group in _components(instance):
        pools = [sorted(instance.schedules[j], key=_order) for j in group]
        best_each = [max(p[0].profit, 0.0) for p in pools]
        suffix = np.concatenate([np.cumsum(best_each[::-1])[::-1], [0.0]])
        m = len(group)
        incumbent = [None]
        incumbent_value = [-np.inf]
        current = [None] * m
        used: set = set()
        stop = [False]

        def dfs(k, value):
            nonlocal nodes
            if stop[0]:
                return
            nodes += 1
            if nodes > node_budget or (time_budget is not None and nodes % 1024 == 0
                                       and time.perf_counter() - start > time_budget):
                stop[0] = True
                return
            if k == m:
                if value > incumbent_value[0]:
                    incumbent_value[0] = value
                    incumbent[0] = list(current)
                return
            for s in pools[k]:
                if value + s.profit + suffix[k + 1] <= incumbent_value[0]:
                    break  # later schedules are no better
                if any(r in used for r in s.requests):
                    continue
                current[k] = s
                used.update(s.requests)
                dfs(k + 1, value + s.profit)
                used.difference_update(s.requests)
                if stop[0]:
                    return

        dfs(0, 0.0)
        if stop[0]:
            optimal = False
        sol = incumbent[0]
        if sol is None:  # budget hit before the first leaf
            sol = [next(s for s in p if not s.requests) for p in pools]
        for j, s in zip(group, sol):
            chosen[j] = s
        obj = sum(s.profit for s in sol)
        total_obj += obj
        total_bound += max(float(suffix[0]), obj) if stop[0] else obj
    return OfflineSolution(chosen, total_obj, total_bound, nodes, optimal, time.perf_counter() - start)


def brute_force_offline(instance: OfflinePlanInstance) -> float:
    """Exhaustive optimum of the set-packing problem (test oracle)."""
    best = -np.inf

    def visit(j, used, value):
        nonlocal best
        if j == instance.n_vehicles:
            best = max(best, value)
            return
        for s in instance.schedules[j]:
            if used.isdisjoint(s.requests):
                visit(j + 1, used | set(s.requests), value + s.profit)

    visit(0, frozenset(), 0.0)
    return float(best)


# --------------------------------------------------------------------------
# MPC policy


@dataclass
class MpcDiagnostics:
    build_seconds: float = 0.0
    solve_seconds: float = 0.0
    nodes: int = 0
    gap: float = 0.0
    pool: int = 0


def plan_to_action(instance: OfflinePlanInstance, solution: OfflineSolution, n_real: int) -> list:
    action = [REJECT] * n_real
    for j, s in enumerate(solution.chosen):
        if s is not None and s.requests and instance.requests[s.requests[0]].real:
            action[s.requests[0]] = j
    return action


def mpc_act(state: SystemState, graph: ZoneGraph, prices: PricingModel, max_wait: int, config: MpcConfig,
            virtual: Sequence, diagnostics: Optional[MpcDiagnostics] = None) -> list:
    """Plan with real plus virtual requests and execute the real first-step decisions."""
    inst = build_offline_instance(state, virtual, graph, prices, max_wait, config.cap, config.max_pool)
    sol = solve_offline(inst, config.node_budget, config.time_budget)
    if diagnostics is not None:
        diagnostics.build_seconds = inst.build_seconds
        diagnostics.solve_seconds = sol.seconds
        diagnostics.nodes = sol.nodes
        diagnostics.gap = sol.gap
        diagnostics.pool = inst.pool_size
    return plan_to_action(inst, sol, state.n_requests)


@dataclass
class MpcPolicy:
    """Callable policy.  With ``future`` set it plans on the true future stream."""

    graph: ZoneGraph
    prices: PricingModel
    max_wait: int
    config: MpcConfig
    dist: Optional[ODDistribution] = None
    seed: int = 0
    future: Optional[list] = None  # per-step OD pair lists of the episode
    log: list = field(default_factory=list)
    verbose: bool = False

    def __post_init__(self):
        if self.dist is None and self.future is None:
            raise ValueError("MPC needs a demand distribution or the true future")
        self.rng = np.random.default_rng(self.seed)

    def virtual(self, t: int) -> list:
        if self.future is not None:
            out = []
            for k in range(1, self.config.horizon + 1):
                if t + k < len(self.future):
                    out.extend((k, int(o), int(d)) for o, d in self.future[t + k])
            return out
        return sample_virtual_requests(self.dist, t, self.config.horizon, self.rng, self.config.count_mode)

    def __call__(self, state: SystemState) -> list:
        diag = MpcDiagnostics() if self.verbose else None
        action = mpc_act(state, self.graph, self.prices, self.max_wait, self.config, self.virtual(state.t), diag)
        if diag is not None:
            self.log.append((state.t, diag))
        return action


def greedy_policy(graph: ZoneGraph, prices: PricingModel, max_wait: int):
    return lambda state: greedy_act(state, graph, prices, max_wait)


def exact_offline_value(fleet, steps: Sequence, graph: ZoneGraph, prices: PricingModel, max_wait: int,
                        start: int = 0) -> float:
    """Perfect-information optimum by dynamic programming over arrival steps.

    Same service model as the schedule formulation (arrival-order service,
    one new request per vehicle and step, two slots, deadline), but the
    joint fleet state is memoised instead of enumerating schedules, which
    keeps whole-episode plans for small fleets tractable.
    """
    from functools import lru_cache

    c = prices.cost_per_km
    horizon = len(steps)
    init = []
    for veh in fleet:
        com = commitment(veh, graph)
        init.append((com.end_node, com.free_in, tuple(com.drop_offsets)))

    def norm(vs, t):
        return tuple((e, max(f - t, 0), tuple(h - t for h in held if h > t)) for e, f, held in vs)

    @lru_cache(maxsize=None)
    def best(t, vs):
        if t >= horizon:
            return 0.0
        reqs = steps[t]
        if not reqs:
            return best(t + 1, norm(vs, 1))
        out = -np.inf

        def assign(i, used, vs_now, gain):
            nonlocal out
            if i == len(reqs):
                out = max(out, gain + best(t + 1, norm(vs_now, 1)))
                return
            assign(i + 1, used, vs_now, gain)
            o, d = reqs[i]
            for j, (e, f, held) in enumerate(vs_now):
                if j in used or len(held) > 1:
                    continue
                pickup = f + int(graph.travel_time[e, o])
                if pickup > max_wait:
                    continue
                g = (prices.revenue_per_km * graph.shortest_distance[o, d]
                     - c * (graph.route_distance[e, o] + graph.route_distance[o, d]))
                drop = pickup + int(graph.travel_time[o, d])
                nv = list(vs_now)
                nv[j] = (int(d), drop, tuple(sorted(held + (drop,))))
                assign(i + 1, used | {j}, tuple(nv), gain + g)

        assign(0, frozenset(), vs, 0.0)
        return out

    return float(best(start, norm(init, 0)))
