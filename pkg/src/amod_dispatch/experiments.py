"""Experiment harnesses: the toy line-graph instance, policy comparison,
KL sweeps and runtime benchmarks.  All outputs are plain rows for CSV."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import agents as ag
from . import baselines as bl
from . import demand as dm
from .training import Episode, EvalResult, RLPolicy, Scenario, evaluate_policy
from .world import EpisodeConfig, PricingModel, SystemState, Vehicle, ZoneGraph, initial_fleet, make_request


# --------------------------------------------------------------------------
# toy instance


@dataclass(frozen=True)
class ToySpec:
    """Line graph where short 'decoy' trips compete with long trips.

    Every ``period`` steps, each end node sees a one-edge decoy trip and a
    full-length trip at the same step, then a one-edge return trip.  The
    arrival-order greedy takes the decoy and the return; holding the vehicle
    for the long trip earns three times as much.
    """

    n_nodes: int = 7
    horizon: int = 40
    max_wait: int = 5
    period: int = 8
    copies: int = 1           # pattern multiplicity; vehicles per end node
    noise_rate: float = 0.25  # interior-origin requests per step
    skip_prob: float = 0.1    # chance a pattern request is absent

    @property
    def fleet_positions(self) -> tuple:
        return tuple([0] * self.copies + [self.n_nodes - 1] * self.copies)

    def doubled(self) -> "ToySpec":
        return ToySpec(self.n_nodes, self.horizon, self.max_wait, self.period, self.copies * 2,
                       self.noise_rate * 2, self.skip_prob)


def toy_steps(spec: ToySpec, rng: np.random.Generator) -> list:
    last = spec.n_nodes - 1
    steps: list = [[] for _ in range(spec.horizon)]
    for t0 in range(0, spec.horizon - 1, spec.period):
        first = [(0, 1), (last, last - 1), (0, last), (last, 0)]
        second = [(1, 0), (last - 1, last)]
        for _ in range(spec.copies):
            steps[t0].extend(p for p in first if rng.random() >= spec.skip_prob)
            steps[t0 + 1].extend(p for p in second if rng.random() >= spec.skip_prob)
    for t in range(spec.horizon):
        for _ in range(rng.poisson(spec.noise_rate)):
            o = int(rng.integers(1, last))
            d = int(rng.integers(0, spec.n_nodes - 1))
            steps[t].append((o, d if d < o else d + 1))
    # the pattern is listed per copy; keep decoys ahead of long trips in arrival order
    for t in range(spec.horizon):
        steps[t].sort(key=lambda p: abs(p[0] - p[1]) if p[0] in (0, last) else 99)
    return steps


def toy_scenario(spec: ToySpec = ToySpec(), n_validation: int = 8, n_test: int = 20, seed: int = 0,
                 profile_dates: int = 50) -> Scenario:
    graph = ZoneGraph.line(spec.n_nodes)
    config = EpisodeConfig(horizon=spec.horizon, max_wait=spec.max_wait, fleet_size=len(spec.fleet_positions),
                           placement="fixed", initial_positions=spec.fleet_positions)
    fleet = tuple(Vehicle(p) for p in spec.fleet_positions)
    root = np.random.SeedSequence([seed, 7919])
    val_ss, test_ss, prof_ss = root.spawn(3)

    def fixed(ss, n, label):
        rng = np.random.default_rng(ss)
        return [Episode(toy_steps(spec, rng), fleet, f"{label}-{k}") for k in range(n)]

    prof_rng = np.random.default_rng(prof_ss)
    profile = dm.demand_profile([dm.RequestStream(toy_steps(spec, prof_rng)) for _ in range(profile_dates)])

    def sample_train(rng):
        return Episode(toy_steps(spec, rng), fleet, "train")

    return Scenario(graph, PricingModel(), config, sample_train, fixed(val_ss, n_validation, "val"),
                    fixed(test_ss, n_test, "test"), profile)


def offline_optimum(episode: Episode, scenario: Scenario) -> float:
    """Perfect-information optimum of the whole episode (closed profit)."""
    return bl.exact_offline_value(episode.fleet, episode.steps, scenario.graph, scenario.prices,
                                  scenario.episode.max_wait)


# --------------------------------------------------------------------------
# policy comparison


def make_policy(name: str, scenario: Scenario, params=None, dist=None, mpc: Optional[bl.MpcConfig] = None,
                seed: int = 0, perfect: bool = False) -> Callable:
    """Factory: episode -> policy callable."""
    g, prices, w = scenario.graph, scenario.prices, scenario.episode.max_wait
    if name == "greedy":
        return lambda ep: bl.greedy_policy(g, prices, w)
    if name == "rl":
        if params is None:
            raise ValueError("policy 'rl' needs a trained actor checkpoint")
        return lambda ep: RLPolicy(params, scenario)
    if name == "mpc":
        cfg = mpc or bl.MpcConfig()
        if perfect:
            return lambda ep: bl.MpcPolicy(g, prices, w, cfg, future=ep.steps, seed=seed)
        if dist is None:
            raise ValueError("policy 'mpc' needs an OD distribution")
        return lambda ep: bl.MpcPolicy(g, prices, w, cfg, dist=dist, seed=seed)
    raise ValueError(f"unknown policy {name!r}")


def percent_vs_greedy(profit: float, greedy: float) -> Optional[float]:
    if greedy == 0:
        return None
    return 100.0 * (profit - greedy) / abs(greedy)


COMPARE_FIELDS = ("policy", "date", "profit", "served_share", "percent_vs_greedy", "flag")


def compare(scenario: Scenario, episodes: Sequence[Episode], policies: Sequence[str], params=None, dist=None,
            mpc: Optional[bl.MpcConfig] = None, mpc_seeds: Sequence[int] = (0,)) -> list:
    """One row per (policy, episode); MPC profits are averaged over its seeds."""
    results: dict = {}
    results["greedy"] = evaluate_policy(make_policy("greedy", scenario), episodes, scenario)
    for name in policies:
        if name == "greedy":
            continue
        if name == "mpc":
            runs = [evaluate_policy(make_policy("mpc", scenario, dist=dist, mpc=mpc, seed=s), episodes, scenario)
                    for s in mpc_seeds]
            results["mpc"] = EvalResult([float(np.mean(x)) for x in zip(*(r.profits for r in runs))],
                                        [float(np.mean(x)) for x in zip(*(r.served for r in runs))],
                                        runs[0].labels)
        else:
            results[name] = evaluate_policy(make_policy(name, scenario, params=params), episodes, scenario)
    rows = []
    for name in policies:
        res = results[name]
        for k, ep in enumerate(episodes):
            pct = percent_vs_greedy(res.profits[k], results["greedy"].profits[k])
            rows.append({"policy": name, "date": ep.label, "profit": res.profits[k],
                         "served_share": res.served[k], "percent_vs_greedy": "" if pct is None else pct,
                         "flag": "greedy_zero" if pct is None else ""})
    return rows


# --------------------------------------------------------------------------
# KL sweep


KL_FIELDS = ("size", "repetition", "kl", "mpc_percent_vs_greedy", "rl_percent_vs_greedy")


def kl_sweep(truth: dm.ODDistribution, sizes: Sequence[int], repetitions: int, seed: int,
             evaluate: Optional[Callable] = None) -> list:
    """KL(truth || estimate from n sampled requests) per size and repetition.

    ``evaluate(estimate, rep) -> (mpc %, rl %)`` optionally adds policy
    comparisons on streams drawn from the truth.
    """
    rows = []
    root = np.random.SeedSequence(seed)
    for size, ss in zip(sizes, root.spawn(len(sizes))):
        for rep, rs in enumerate(ss.spawn(repetitions)):
            rng = np.random.default_rng(rs)
            counts = dm.sample_requests(truth, int(size), rng)
            est = dm.estimate_from_counts(counts, truth.n_zones, truth.interval_steps, truth.expected)
            kl = dm.kl_divergence(truth, est).aggregate
            mpc_pct = rl_pct = ""
            if evaluate is not None:
                mpc_pct, rl_pct = evaluate(est, rep)
            rows.append({"size": int(size), "repetition": rep, "kl": kl,
                         "mpc_percent_vs_greedy": mpc_pct, "rl_percent_vs_greedy": rl_pct})
    return rows


def median_kl(rows: Sequence[dict]) -> dict:
    sizes = sorted({r["size"] for r in rows})
    return {s: float(np.median([r["kl"] for r in rows if r["size"] == s])) for s in sizes}


# --------------------------------------------------------------------------
# runtime benchmark


BENCH_FIELDS = ("fleet_size", "n_requests", "steps", "rl_decide_s", "mpc_build_s", "mpc_solve_s", "mpc_total_s",
                "mpc_status")


def hex_world(radius: int = 3, spacing_km: float = 0.917, edge_steps: int = 1) -> ZoneGraph:
    """37-cell hexagon operating area (radius 3)."""
    return dm.HexGrid.hexagon(radius, spacing_km).to_graph(edge_steps)


def random_busy_state(graph: ZoneGraph, n_vehicles: int, n_requests: int, rng, t: int = 0,
                      busy_share: float = 0.5) -> SystemState:
    """A plausible mid-episode state: about ``busy_share`` of the vehicles carry one or two trips."""
    n = graph.n_nodes

    def trip(rid):
        o, d = (int(x) for x in rng.choice(n, 2, replace=False))
        return make_request(graph, rid, o, d, max(t - 1, 0))

    fleet, rid = [], 0
    for _ in range(n_vehicles):
        pos = int(rng.integers(n))
        if rng.random() >= busy_share:
            fleet.append(Vehicle(pos))
            continue
        r1 = trip(rid)
        picked = rng.random() < 0.5 and r1.destination != pos
        r1 = replace(r1, wait=None if picked else int(rng.integers(0, 3)))
        r2 = replace(trip(rid + 1), wait=int(rng.integers(0, 3))) if rng.random() < 0.3 else None
        rid += 2
        fleet.append(Vehicle(pos, 0, r1, r2))
    reqs = tuple(replace(trip(10_000_000 + k), placed_at=t) for k in range(n_requests))
    return SystemState(t, reqs, tuple(fleet), n_requests)


def bench_runtime(graph: ZoneGraph, params, fleet_sizes: Sequence[int], requests_per_vehicle: float,
                  steps: int, dist: Optional[dm.ODDistribution], mpc: bl.MpcConfig, seed: int = 0,
                  horizon: int = 60, max_wait: int = 5, dtype=np.float32, run_mpc: Callable = None,
                  mpc_steps: Optional[int] = None) -> list:
    """Mean per-step wall time of rl-decide and MPC on random busy states.

    MPC is timed on the first ``mpc_steps`` states only (all by default).
    When its schedule pool overflows, ``mpc_status`` is "pool_limit" and the
    MPC time is the time spent before giving up.
    """
    prices = PricingModel()
    scales = ag.FeatureScales.from_graph(graph, horizon)
    arrays = params.arrays() if hasattr(params, "arrays") else params
    rows = []
    for K in fleet_sizes:
        rng = np.random.default_rng([seed, K])
        R = max(1, int(round(requests_per_vehicle * K)))
        states = [random_busy_state(graph, K, R, rng, t=k) for k in range(steps)]
        policy_rng = np.random.default_rng(seed)
        t_rl = []
        for st in states:
            start = time.perf_counter()
            feats = ag.encode_state(st, graph, scales, None, max_wait)
            ag.decide(arrays, feats, "test", policy_rng, dtype)
            t_rl.append(time.perf_counter() - start)
        build, solve, status = [], [], "skipped"
        do_mpc = run_mpc(K) if run_mpc is not None else True
        if do_mpc and dist is not None:
            status = "ok"
            mpc_rng = np.random.default_rng([seed, K, 1])
            for st in states[:mpc_steps]:
                virtual = bl.sample_virtual_requests(dist, st.t, mpc.horizon, mpc_rng, mpc.count_mode)
                diag = bl.MpcDiagnostics()
                start = time.perf_counter()
                try:
                    bl.mpc_act(st, graph, prices, max_wait, mpc, virtual, diag)
                except bl.PoolSizeError:
                    # no plan at all; the time spent building is a lower bound on the step cost
                    build.append(time.perf_counter() - start)
                    solve.append(0.0)
                    status = "pool_limit"
                    break
                build.append(diag.build_seconds)
                solve.append(diag.solve_seconds)
        mb = float(np.mean(build)) if build else math.nan
        ms = float(np.mean(solve)) if solve else math.nan
        rows.append({"fleet_size": K, "n_requests": R, "steps": steps, "rl_decide_s": float(np.mean(t_rl)),
                     "mpc_build_s": mb, "mpc_solve_s": ms, "mpc_total_s": mb + ms, "mpc_status": status})
    return rows


# --------------------------------------------------------------------------
# small-world MPC suite


@dataclass(frozen=True)
class SmallWorldSpec:
    """Randomised small instances on which full-horizon MPC is exact."""

    hex_radius: int = 1
    edge_steps: int = 2
    horizon: int = 12
    fleet_size: int = 2
    expected_per_step: float = 0.6
    max_wait: int = 5
    n_episodes: int = 50


def small_world_suite(spec: SmallWorldSpec = SmallWorldSpec(), seed: int = 0) -> tuple:
    """(scenario, true distribution) with ``spec.n_episodes`` test episodes.

    The demand tables are drawn once per suite; every episode draws its own
    request stream and initial fleet.
    """
    graph = hex_world(spec.hex_radius, edge_steps=spec.edge_steps)
    root = np.random.SeedSequence([seed, 31337])
    dist_ss, ep_ss = root.spawn(2)
    interval = spec.horizon
    dist = dm.synthetic_distribution(graph.n_nodes, 1, spec.expected_per_step * interval,
                                     np.random.default_rng(dist_ss), interval_steps=interval)
    config = EpisodeConfig(spec.horizon, spec.max_wait, spec.fleet_size)
    episodes = []
    for k, ss in enumerate(ep_ss.spawn(spec.n_episodes)):
        s_stream, s_fleet = ss.spawn(2)
        stream = dm.sample_stream(dist, spec.horizon, s_stream)
        fleet = initial_fleet(graph, config, np.random.default_rng(s_fleet))
        episodes.append(Episode(stream.steps, fleet, f"small-{k}"))
    scenario = Scenario(graph, PricingModel(), config, lambda rng: episodes[int(rng.integers(len(episodes)))],
                        [], episodes)
    return scenario, dist


def perfect_mpc_config(spec: SmallWorldSpec, cap: Optional[int] = None) -> bl.MpcConfig:
    """Full remaining horizon; with enough schedule slots the plan is the offline optimum."""
    return bl.MpcConfig(horizon=spec.horizon, cap=cap or spec.horizon, node_budget=10_000_000)
