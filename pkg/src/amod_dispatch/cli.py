"""Command-line front door: amod-dispatch <command> --config run.toml ...

Every command writes into the output directory (``experiment.output_dir``
or ``--out``) and leaves a manifest JSON next to its CSV outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import agents as ag
from . import baselines as bl
from . import demand as dm
from . import experiments as ex
from . import training as tr
from .config import ConfigError, ExperimentConfig, RunManifest, load_config
from .world import EpisodeConfig, PricingModel, ZoneGraph, initial_fleet

log = logging.getLogger("amod_dispatch")

POLICIES = ("greedy", "mpc", "rl")
OD_FILE = "od_distribution.json"
ACTOR_FILE = "best_actor.ckpt"


class ArtifactMissing(FileNotFoundError):
    pass


# --------------------------------------------------------------------------
# config -> objects


def sac_config(cfg: ExperimentConfig) -> tr.SACConfig:
    s = dict(cfg["sac"])
    shape = ag.NetworkShape(int(s.pop("embed")), int(s.pop("request_attention")),
                            int(s.pop("vehicle_attention")), tuple(int(w) for w in s.pop("trunk")))
    return tr.SACConfig(shape=shape, **s)


def mpc_config(cfg: ExperimentConfig) -> bl.MpcConfig:
    m = cfg["mpc"]
    return bl.MpcConfig(horizon=int(m["horizon"]), cap=int(m["cap"]), node_budget=int(m["node_budget"]),
                        time_budget=float(m["time_budget"]) or None, max_pool=int(m["max_pool"]),
                        count_mode=m["count_mode"])


def toy_spec(cfg: ExperimentConfig) -> ex.ToySpec:
    t = cfg["toy"]
    return ex.ToySpec(int(t["n_nodes"]), int(t["horizon"]), int(t["max_wait"]), int(t["period"]),
                      int(t["copies"]), float(t["noise_rate"]), float(t["skip_prob"]))


def zone_graph(cfg: ExperimentConfig) -> ZoneGraph:
    g = cfg["graph"]
    path = cfg.resolve(g["file"])
    if path is not None:
        return ZoneGraph.load(path)
    return ex.hex_world(int(g["hex_radius"]), float(g["spacing_km"]), int(g["edge_steps"]))


def hex_grid(cfg: ExperimentConfig) -> dm.HexGrid:
    g = cfg["graph"]
    return dm.HexGrid.hexagon(int(g["hex_radius"]), float(g["spacing_km"]))


def window(cfg: ExperimentConfig) -> dm.EpisodeWindow:
    return dm.EpisodeWindow(str(cfg["data"]["window_start"]), int(cfg["episode"]["horizon"]))


def out_dir(cfg: ExperimentConfig, override: Optional[str]) -> Path:
    path = Path(override) if override else cfg.resolve(cfg["experiment"]["output_dir"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def store_dir(cfg: ExperimentConfig, out: Path) -> Path:
    return cfg.resolve(cfg["data"]["store"]) or out / "store"


def load_store(store: Path) -> dict:
    summary = store / "summary.json"
    if not summary.exists():
        raise ArtifactMissing(f"trip store summary not found: {summary} (run 'ingest' first)")
    dates = json.loads(summary.read_text())["dates"]
    return {d: dm.RequestStream.from_jsonl(store / "streams" / f"{d}.jsonl") for d in dates}


def split_dates(cfg: ExperimentConfig, dates: Sequence[str]) -> tuple:
    """Explicit date lists win; otherwise a seeded shuffle cut into the configured counts."""
    d = cfg["data"]
    if d["train_dates"] or d["validation_dates"] or d["test_dates"]:
        splits = (list(d["train_dates"]), list(d["validation_dates"]), list(d["test_dates"]))
        unknown = sorted(set().union(*splits) - set(dates))
        if unknown:
            raise ConfigError(f"dates not in the trip store: {unknown[:5]}")
        return splits
    n = (int(d["train"]), int(d["validation"]), int(d["test"]))
    order = sorted(dates)
    np.random.default_rng(int(d["split_seed"])).shuffle(order)
    if len(order) < 3:
        raise ConfigError(f"need at least 3 dates for train/validation/test, store has {len(order)}")
    if len(order) < sum(n):
        log.warning("store has %d dates, fewer than the %d requested; splitting proportionally", len(order), sum(n))
        n_test = max(1, round(len(order) * n[2] / sum(n)))
        n_val = max(1, round(len(order) * n[1] / sum(n)))
        n = (len(order) - n_test - n_val, n_val, n_test)
    return order[:n[0]], order[n[0]:n[0] + n[1]], order[n[0] + n[1]:n[0] + n[1] + n[2]]


def data_scenario(cfg: ExperimentConfig, out: Path) -> tuple:
    graph = zone_graph(cfg)
    e = cfg["episode"]
    episode = EpisodeConfig(int(e["horizon"]), int(e["max_wait"]), int(e["fleet_size"]), e["placement"],
                            tuple(e.get("initial_positions", ())))
    streams = load_store(store_dir(cfg, out))
    train_d, val_d, test_d = split_dates(cfg, list(streams))

    def fleet_for(label: str):
        # the fleet of an evaluation date is fixed by the date itself
        seed = int.from_bytes(label.encode(), "little") % (2 ** 32)
        return initial_fleet(graph, episode, np.random.default_rng(seed))

    def episodes(dates):
        return [tr.Episode(streams[d].steps, fleet_for(d), d) for d in dates]

    def sample_train(rng):
        d = train_d[int(rng.integers(len(train_d)))]
        return tr.Episode(streams[d].steps, initial_fleet(graph, episode, rng), d)

    p = cfg["pricing"]
    prices = PricingModel(float(p["revenue_per_km"]), float(p["cost_per_km"]))
    profile = dm.demand_profile([streams[d] for d in train_d])
    scenario = tr.Scenario(graph, prices, episode, sample_train, episodes(val_d), episodes(test_d), profile)
    return scenario, [streams[d] for d in train_d]


def toy_training_streams(cfg: ExperimentConfig) -> list:
    spec = toy_spec(cfg)
    rng = np.random.default_rng([int(cfg["toy"]["scenario_seed"]), 104729])
    return [dm.RequestStream(ex.toy_steps(spec, rng), "toy") for _ in range(int(cfg["data"]["train"]))]


def build_scenario(cfg: ExperimentConfig, out: Path) -> tr.Scenario:
    if cfg["experiment"]["kind"] == "toy":
        t = cfg["toy"]
        return ex.toy_scenario(toy_spec(cfg), int(t["n_validation"]), int(t["n_test"]), int(t["scenario_seed"]))
    return data_scenario(cfg, out)[0]


def load_distribution(cfg: ExperimentConfig, out: Path) -> dm.ODDistribution:
    path = out / OD_FILE
    if not path.exists():
        raise ArtifactMissing(f"OD distribution not found: {path} (run 'estimate' first)")
    return dm.ODDistribution.load(path)


def load_params(path: Path) -> dict:
    if not path.exists():
        raise ArtifactMissing(f"actor checkpoint not found: {path} (run 'train' first)")
    return tr.load_actor(path)[0]


def write_rows(path: Path, fields: Sequence[str], rows: Sequence[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in fields})


# --------------------------------------------------------------------------
# commands


def cmd_ingest(cfg: ExperimentConfig, out: Path, seeds) -> dict:
    trips = cfg.resolve(cfg["data"]["trips"])
    if trips is None:
        raise ConfigError("data.trips is not set")
    manifest = RunManifest.begin("ingest", cfg, seeds)
    report = dm.ingest_trips(trips, hex_grid(cfg), int(cfg["data"]["downscale"]), window(cfg))
    store = store_dir(cfg, out)
    (store / "streams").mkdir(parents=True, exist_ok=True)
    counts = {}
    for date in sorted(report.trips):
        stream = dm.replay_stream(report.trips, date, window(cfg))
        stream.provenance = f"{trips.name}:{date}"
        stream.to_jsonl(store / "streams" / f"{date}.jsonl")
        counts[date] = {"total": stream.total(), "max_per_step": int(stream.counts().max())}
    summary = {"dates": sorted(counts), "counts": counts, "ingest": report.summary()}
    (store / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    manifest.finish(out / "manifest_ingest.json", store=store)
    return summary


def cmd_estimate(cfg: ExperimentConfig, out: Path, seeds) -> dm.ODDistribution:
    manifest = RunManifest.begin("estimate", cfg, seeds)
    d = cfg["data"]
    if cfg["experiment"]["kind"] == "toy":
        streams, n_zones = toy_training_streams(cfg), int(cfg["toy"]["n_nodes"])
    else:
        _, streams = data_scenario(cfg, out)
        n_zones = zone_graph(cfg).n_nodes
    dist = dm.estimate_od_distribution(streams, n_zones, int(d["interval_steps"]), float(d["epsilon"]))
    dist.save(out / OD_FILE)
    manifest.finish(out / "manifest_estimate.json", distribution=out / OD_FILE)
    return dist


def cmd_train(cfg: ExperimentConfig, out: Path, seeds, resume: bool = False) -> dict:
    manifest = RunManifest.begin("train", cfg, seeds)
    scenario = build_scenario(cfg, out)
    sac = sac_config(cfg)
    best = None
    artifacts = {}
    for seed in seeds:
        run_dir = out / f"seed_{seed}"
        res = tr.train(scenario, sac, seed, run_dir, resume=resume, log=log.info)
        artifacts[f"metrics_seed_{seed}"] = run_dir / "metrics.csv"
        value = res.state.best_validation
        log.info("seed %d: best validation %.4f at step %d", seed, value, res.state.best_step)
        if best is None or value > best[0]:
            best = (value, seed, run_dir / ACTOR_FILE)
    shutil.copyfile(best[2], out / ACTOR_FILE)
    selection = {"seed": best[1], "validation_mean_profit": best[0]}
    (out / "selection.json").write_text(json.dumps(selection, indent=1))
    manifest.finish(out / "manifest_train.json", checkpoint=out / ACTOR_FILE, **artifacts)
    return selection


def cmd_evaluate(cfg: ExperimentConfig, out: Path, seeds) -> list:
    manifest = RunManifest.begin("evaluate", cfg, seeds)
    scenario = build_scenario(cfg, out)
    params = load_params(out / ACTOR_FILE)
    res = tr.evaluate(params, scenario.test, scenario)
    rows = [{"date": lbl, "profit": p, "served_share": s} for lbl, p, s in zip(res.labels, res.profits, res.served)]
    write_rows(out / "evaluation.csv", ("date", "profit", "served_share"), rows)
    manifest.finish(out / "manifest_evaluate.json", evaluation=out / "evaluation.csv")
    return rows


def cmd_compare(cfg: ExperimentConfig, out: Path, seeds, policies: Sequence[str]) -> list:
    unknown = [p for p in policies if p not in POLICIES]
    if unknown:
        raise ConfigError(f"unknown policies {unknown}; choose from {list(POLICIES)}")
    manifest = RunManifest.begin("compare", cfg, seeds)
    scenario = build_scenario(cfg, out)
    params = load_params(out / ACTOR_FILE) if "rl" in policies else None
    dist = load_distribution(cfg, out) if "mpc" in policies else None
    rows = ex.compare(scenario, scenario.test, policies, params=params, dist=dist, mpc=mpc_config(cfg),
                      mpc_seeds=[int(s) for s in cfg["mpc"]["seeds"]])
    write_rows(out / "comparison.csv", ex.COMPARE_FIELDS, rows)
    manifest.finish(out / "manifest_compare.json", comparison=out / "comparison.csv")
    return rows


def cmd_kl_sweep(cfg: ExperimentConfig, out: Path, seeds) -> list:
    k = cfg["kl_sweep"]
    sizes = [int(s) for s in k["sizes"]]
    if any(s < 1 for s in sizes):
        raise ConfigError("kl_sweep sizes must be positive")
    manifest = RunManifest.begin("kl-sweep", cfg, seeds)
    seed = seeds[0]
    grid = dm.HexGrid.hexagon(int(k["hex_radius"]), float(cfg["graph"]["spacing_km"]))
    truth = dm.synthetic_distribution(grid.n_zones, int(k["n_intervals"]), float(k["expected_per_interval"]),
                                      np.random.default_rng([seed, 1]), float(k["concentration"]),
                                      int(cfg["data"]["interval_steps"]))
    evaluate = None
    if k["evaluate"]:
        evaluate = _kl_evaluator(cfg, out, grid, truth, seed)
    rows = ex.kl_sweep(truth, sizes, int(k["repetitions"]), seed, evaluate)
    write_rows(out / "kl_sweep.csv", ex.KL_FIELDS, rows)
    manifest.finish(out / "manifest_kl_sweep.json", table=out / "kl_sweep.csv")
    return rows


def _kl_evaluator(cfg: ExperimentConfig, out: Path, grid: dm.HexGrid, truth: dm.ODDistribution, seed: int):
    """MPC driven by each estimate (and a trained actor, if present) on streams drawn from the truth."""
    k = cfg["kl_sweep"]
    graph = grid.to_graph(int(cfg["graph"]["edge_steps"]))
    horizon = truth.n_intervals * truth.interval_steps
    episode = EpisodeConfig(horizon, int(cfg["episode"]["max_wait"]), int(k["fleet_size"]))
    rng = np.random.default_rng([seed, 2])
    streams = [dm.sample_stream(truth, horizon, [seed, 3, n]) for n in range(int(k["n_streams"]))]
    episodes = [tr.Episode(s.steps, initial_fleet(graph, episode, rng), f"stream-{n}") for n, s in enumerate(streams)]
    scenario = tr.Scenario(graph, PricingModel(), episode, lambda r: episodes[0], [], episodes,
                           dm.demand_profile(streams))
    greedy = tr.evaluate_policy(ex.make_policy("greedy", scenario), episodes, scenario).mean_profit
    ckpt = out / ACTOR_FILE
    rl_pct = ""
    if ckpt.exists():
        rl = tr.evaluate(load_params(ckpt), episodes, scenario).mean_profit
        rl_pct = ex.percent_vs_greedy(rl, greedy)
    mpc = mpc_config(cfg)

    def evaluate(estimate, rep):
        prof = tr.evaluate_policy(ex.make_policy("mpc", scenario, dist=estimate, mpc=mpc, seed=rep),
                                  episodes, scenario).mean_profit
        pct = ex.percent_vs_greedy(prof, greedy)
        return ("" if pct is None else pct), ("" if rl_pct is None else rl_pct)

    return evaluate


def cmd_bench_runtime(cfg: ExperimentConfig, out: Path, seeds) -> list:
    b = cfg["bench"]
    manifest = RunManifest.begin("bench-runtime", cfg, seeds)
    graph = zone_graph(cfg)
    ckpt = cfg.resolve(b["checkpoint"])
    if ckpt is not None:
        params = load_params(ckpt)
    else:
        # timings do not depend on the weights, only on the architecture
        params = ag.init_actor(sac_config(cfg).shape, np.random.default_rng(seeds[0])).arrays()
    probs_rng = [seeds[0], 4]
    rpv = float(b["requests_per_vehicle"])
    rows = []
    for K in (int(k) for k in b["fleet_sizes"]):
        # MPC samples virtual requests at the same per-vehicle rate as the benchmark states
        dist = dm.synthetic_distribution(graph.n_nodes, 4, rpv * K * 15, np.random.default_rng(probs_rng))
        rows += ex.bench_runtime(graph, params, [K], rpv, int(b["steps"]), dist, mpc_config(cfg), seeds[0],
                                 int(cfg["episode"]["horizon"]), int(cfg["episode"]["max_wait"]),
                                 np.dtype(b["dtype"]).type, lambda k: k <= int(b["mpc_max_fleet"]),
                                 int(b["mpc_steps"]) or None)
    write_rows(out / "bench_runtime.csv", ex.BENCH_FIELDS, rows)
    manifest.finish(out / "manifest_bench_runtime.json", table=out / "bench_runtime.csv")
    return rows


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amod-dispatch", description="AMoD dispatching experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("ingest", "estimate", "train", "evaluate", "compare", "kl-sweep", "bench-runtime"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML experiment file")
        p.add_argument("--seed", type=int, action="append", help="seed (repeatable); default: config seeds")
        p.add_argument("--out", help="output directory (default: experiment.output_dir)")
        p.add_argument("--verbose", "-v", action="store_true")
        if name == "compare":
            p.add_argument("--policies", default="greedy,mpc,rl", help="comma-separated subset of greedy,mpc,rl")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from the last periodic checkpoint")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        seeds = args.seed or cfg.seeds
        out = out_dir(cfg, args.out)
        cmd = args.command
        if cmd == "ingest":
            summary = cmd_ingest(cfg, out, seeds)
            print(f"ingested {len(summary['dates'])} dates into {store_dir(cfg, out)}")
        elif cmd == "estimate":
            cmd_estimate(cfg, out, seeds)
            print(f"wrote {out / OD_FILE}")
        elif cmd == "train":
            sel = cmd_train(cfg, out, seeds, args.resume)
            print(f"selected seed {sel['seed']} (validation mean profit {sel['validation_mean_profit']:.3f})")
        elif cmd == "evaluate":
            rows = cmd_evaluate(cfg, out, seeds)
            print(f"mean test profit {np.mean([r['profit'] for r in rows]):.3f}")
        elif cmd == "compare":
            policies = [p.strip() for p in args.policies.split(",") if p.strip()]
            cmd_compare(cfg, out, seeds, policies)
            print(f"wrote {out / 'comparison.csv'}")
        elif cmd == "kl-sweep":
            cmd_kl_sweep(cfg, out, seeds)
            print(f"wrote {out / 'kl_sweep.csv'}")
        else:
            cmd_bench_runtime(cfg, out, seeds)
            print(f"wrote {out / 'bench_runtime.csv'}")
    except (ConfigError, FileNotFoundError, dm.DemandError, tr.TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
