"""Discrete multi-agent soft actor-critic for the dispatching agents.

Each stored transition keeps the pre-decision state, the global action,
the per-agent reward matrix and a next state whose request block is
replaced by the current requests, so that every agent of ``s`` has a
counterpart in ``s'`` for the critic target.
"""

from __future__ import annotations

import csv
import json
import math
import pickle
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import agents as ag
from . import neural as nn
from .world import (EpisodeConfig, PricingModel, SystemState, ZoneGraph, initial_state,
                    requests_from_pairs, run_episode, step)


@dataclass(frozen=True)
class SACConfig:
    alpha: float = 0.5
    gamma: float = 0.9
    smoothing: float = 5e-3
    batch_size: int = 128
    total_steps: int = 200_000
    warmup_steps: int = 20_000
    update_every: int = 20
    validate_every: int = 2_880
    buffer_capacity: int = 100_000
    learning_rate: float = 3e-4
    l2: float = 1e-4
    clip_norm: float = 10.0
    huber_delta: float = 10.0
    checkpoint_every: int = 0  # episodes between resumable checkpoints, 0 = never
    shape: ag.NetworkShape = field(default_factory=ag.NetworkShape)

    def __post_init__(self):
        positive = (self.alpha, self.gamma, self.smoothing, self.batch_size, self.total_steps,
                    self.update_every, self.validate_every, self.buffer_capacity, self.learning_rate)
        if any(not v > 0 for v in positive) or self.warmup_steps < 0:
            raise ValueError("SAC settings must be positive")
        if self.warmup_steps >= self.total_steps:
            raise ValueError("warmup must be shorter than training")


# --------------------------------------------------------------------------
# replay buffer


@dataclass
class Transition:
    state: SystemState
    action: tuple
    rewards: np.ndarray
    next_state: SystemState  # request block amended to the requests of ``state``
    done: bool
    features: ag.StateFeatures
    next_features: ag.StateFeatures


def amend_next_state(state: SystemState, next_state: SystemState) -> SystemState:
    """Give ``next_state`` the request block of ``state``.

    The running request count is shifted accordingly, as if the same
    requests had been placed again.
    """
    placed = next_state.placed_so_far - next_state.n_requests + state.n_requests
    return replace(next_state, requests=state.requests, placed_so_far=placed)


class ReplayBuffer:
    """FIFO ring buffer with running reward moments for normalisation."""

    def __init__(self, capacity: int = 100_000, encoder: Optional[Callable] = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.encoder = encoder
        self.items: list = []
        self.head = 0
        # sums of (r - shift) and (r - shift)^2 over every stored reward
        self._shift: Optional[float] = None
        self._n = 0
        self._s1 = 0.0
        self._s2 = 0.0

    def __len__(self) -> int:
        return len(self.items)

    def _account(self, rewards: np.ndarray, sign: int) -> None:
        if rewards.size == 0:
            return
        if self._shift is None:
            self._shift = float(rewards.reshape(-1)[0])
        z = rewards.reshape(-1) - self._shift
        self._n += sign * z.size
        self._s1 += sign * float(z.sum())
        self._s2 += sign * float((z * z).sum())

    def reward_std(self) -> float:
        """Population standard deviation of every stored per-agent reward."""
        if self._n == 0:
            return 0.0
        mean = self._s1 / self._n
        var = self._s2 / self._n - mean * mean
        return math.sqrt(var) if var > 1e-12 * (1.0 + self._s2 / self._n) else 0.0

    def add(self, tr: Transition) -> None:
        if len(self.items) < self.capacity:
            self.items.append(tr)
        else:
            self._account(self.items[self.head].rewards, -1)
            self.items[self.head] = tr
            self.head = (self.head + 1) % self.capacity
        self._account(tr.rewards, +1)


def store_transition(buffer: ReplayBuffer, s: SystemState, action, rewards, s_next: SystemState,
                     done: bool = False, features=None) -> Transition:
    amended = amend_next_state(s, s_next)
    rewards = np.asarray(rewards, dtype=float).reshape(s.n_requests, s.n_vehicles)
    enc = buffer.encoder
    f = features if features is not None else (enc(s) if enc else None)
    f2 = enc(amended) if enc else None
    tr = Transition(s, tuple(int(a) for a in action), rewards, amended, bool(done), f, f2)
    buffer.add(tr)
    return tr


@dataclass
class Batch:
    transitions: list
    rewards: list  # normalised reward matrices
    scale: float


def sample_batch(buffer: ReplayBuffer, rng: np.random.Generator, batch_size: int = 128) -> Batch:
    if len(buffer) < batch_size:
        raise ValueError(f"buffer holds {len(buffer)} transitions, batch needs {batch_size}")
    idx = rng.integers(0, len(buffer), size=batch_size)
    sigma = buffer.reward_std()
    scale = sigma if sigma > 0 else 1.0
    items = [buffer.items[k] for k in idx]
    return Batch(items, [t.rewards / scale for t in items], scale)


# --------------------------------------------------------------------------
# losses


def _own_action(batch: ag.AgentBatch, actions) -> np.ndarray:
    """1 where the agent's request went to the agent's vehicle."""
    out = np.zeros(len(batch.agent_state), dtype=np.int64)
    for n, (b, i, j) in enumerate(zip(batch.agent_state, batch.agent_i, batch.agent_j)):
        out[n] = int(actions[b][i] == j)
    return out


def _policy_actions(actor, feats: Sequence[ag.StateFeatures], rng) -> list:
    """Global actions of the current policy (train-mode sampling)."""
    return [ag.decide(actor, f, "train", rng).action if f.n_requests else [] for f in feats]


def _masked_log_policy(logits: nn.Tensor, full: np.ndarray):
    """Log-probabilities with full vehicles forced to reject (constant rows)."""
    logp = nn.log_softmax(logits).data
    if full.any():
        logp = logp.copy()
        logp[full, 0] = 0.0
        logp[full, 1] = -np.inf
    return logp


def _min_q(critics, batch, actions) -> np.ndarray:
    qs = [ag.critic_values(c, batch, actions).data for c in critics]
    return np.minimum(qs[0], qs[1])


def _pi_weighted(logp: np.ndarray, values: np.ndarray, alpha: float) -> np.ndarray:
    """sum_a pi(a) (values(a) - alpha log pi(a)), with 0 log 0 = 0."""
    pi = np.exp(logp)
    safe = np.where(pi > 0, logp, 0.0)
    return (pi * (values - alpha * safe)).sum(axis=1)


def critic_targets(batch: Batch, actor, targets, alpha: float, gamma: float, rng) -> tuple:
    """y for every open agent of every sampled state, plus the matching agent batch."""
    feats = [t.features for t in batch.transitions]
    nfeats = [t.next_features for t in batch.transitions]
    agents_s = ag.build_batch(feats, open_only=True)
    agents_n = ag.build_batch(nfeats)
    next_actions = _policy_actions(actor, nfeats, rng)
    actor_c = ag.constants(actor) if isinstance(actor, nn.ParameterSet) else actor
    logits = ag.actor_logits(actor_c, agents_n)
    full_n = np.concatenate([f.full for f in nfeats])[agents_n.agent_veh] if nfeats else np.zeros(0, bool)
    logp = _masked_log_policy(logits, full_n)
    q_next = _min_q([ag.constants(t) if isinstance(t, nn.ParameterSet) else t for t in targets], agents_n, next_actions)
    value = _pi_weighted(logp, q_next, alpha)
    # agent (b, i, j) sits at row offset_b + i * K_b + j of the full next batch
    per_state = np.array([f.n_requests * f.n_vehicles for f in nfeats])
    offsets = np.concatenate([[0], np.cumsum(per_state)])
    K = np.array([f.n_vehicles for f in nfeats])
    rows = offsets[agents_s.agent_state] + agents_s.agent_i * K[agents_s.agent_state] + agents_s.agent_j
    r = np.array([batch.rewards[b][i, j] for b, i, j in zip(agents_s.agent_state, agents_s.agent_i, agents_s.agent_j)])
    done = np.array([batch.transitions[b].done for b in agents_s.agent_state], dtype=bool)
    y = r + np.where(done, 0.0, gamma * value[rows]) if len(rows) else np.zeros(0)
    return y, agents_s


def critic_loss(critic: nn.ParameterSet, batch: Batch, y: np.ndarray, agents_s: ag.AgentBatch,
                delta: float = 10.0) -> nn.Tensor:
    actions = [t.action for t in batch.transitions]
    q = ag.critic_values(critic, agents_s, actions)
    own = _own_action(agents_s, actions)
    onehot = np.zeros((len(own), 2))
    onehot[np.arange(len(own)), own] = 1.0
    chosen = nn.total(nn.mul(q, onehot), axis=1)
    err = nn.huber(chosen, nn.Tensor(y), delta)
    return nn.mul(nn.total(err), 1.0 / len(batch.transitions))


def actor_loss(actor: nn.ParameterSet, batch: Batch, critics, alpha: float, rng) -> nn.Tensor:
    """sum over agents of pi . (alpha log pi - min Q), Q evaluated at freshly sampled global actions."""
    feats = [t.features for t in batch.transitions]
    agents_s = ag.build_batch(feats, open_only=True)
    actions = _policy_actions(actor, feats, rng)
    q = _min_q([ag.constants(c) if isinstance(c, nn.ParameterSet) else c for c in critics], agents_s, actions)
    logp = nn.log_softmax(ag.actor_logits(actor, agents_s))
    pi = nn.exp(logp)
    inner = nn.sub(nn.mul(logp, alpha), nn.Tensor(q))
    return nn.mul(nn.total(nn.mul(pi, inner)), 1.0 / len(batch.transitions))


def target_update(primary: nn.ParameterSet, target: nn.ParameterSet, rho: float = 5e-3) -> None:
    target.assign({k: (1.0 - rho) * target[k].data + rho * primary[k].data for k in primary.names()})


# --------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    actor: nn.ParameterSet
    critics: list
    targets: list
    actor_opt: nn.AdamState
    critic_opts: list
    env_step: int = 0
    episode: int = 0
    updates: int = 0
    best_validation: float = -math.inf
    best_step: int = -1
    best_actor: Optional[dict] = None

    @classmethod
    def fresh(cls, config: SACConfig, rng: np.random.Generator) -> "TrainState":
        actor = ag.init_actor(config.shape, rng)
        critics = [ag.init_critic(config.shape, rng) for _ in range(2)]
        return cls(actor, critics, [c.copy() for c in critics], nn.AdamState(lr=config.learning_rate),
                   [nn.AdamState(lr=config.learning_rate) for _ in range(2)])


class TrainingDiverged(RuntimeError):
    pass


def _apply(params: nn.ParameterSet, loss: nn.Tensor, opt: nn.AdamState, config: SACConfig) -> float:
    total = nn.add(loss, nn.l2_penalty(params, config.l2))
    value = float(total.data)
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value}")
    params.zero_grad()
    total.backward()
    nn.adam_step(params, nn.clip_gradients(params.grads(), config.clip_norm), opt)
    params.zero_grad()
    return value


def update(ts: TrainState, batch: Batch, config: SACConfig, rng) -> tuple:
    """One gradient step on both critics, then the actor, then the targets."""
    y, agents_s = critic_targets(batch, ts.actor, ts.targets, config.alpha, config.gamma, rng)
    lc = []
    for c, opt in zip(ts.critics, ts.critic_opts):
        lc.append(_apply(c, critic_loss(c, batch, y, agents_s, config.huber_delta), opt, config))
    la = _apply(ts.actor, actor_loss(ts.actor, batch, ts.critics, config.alpha, rng), ts.actor_opt, config)
    for c, t in zip(ts.critics, ts.targets):
        target_update(c, t, config.smoothing)
    ts.updates += 1
    return la, lc[0], lc[1]


# --------------------------------------------------------------------------
# scenarios and evaluation


@dataclass
class Episode:
    steps: list   # per-step OD pair lists
    fleet: tuple
    label: str = ""


@dataclass
class Scenario:
    """Everything needed to roll out episodes of one dispatching instance."""

    graph: ZoneGraph
    prices: PricingModel
    episode: EpisodeConfig
    sample_train: Callable  # rng -> Episode
    validation: list = field(default_factory=list)
    test: list = field(default_factory=list)
    profile: object = None
    tau_cap: Optional[float] = None

    def __post_init__(self):
        self.scales = ag.FeatureScales.from_graph(self.graph, self.episode.horizon, self.tau_cap)

    def encode(self, state: SystemState) -> ag.StateFeatures:
        return ag.encode_state(state, self.graph, self.scales, self.profile, self.episode.max_wait)


class RLPolicy:
    def __init__(self, params, scenario: Scenario, mode: str = "test", rng=None, dtype=np.float64):
        self.params = params.arrays() if isinstance(params, nn.ParameterSet) else dict(params)
        self.scenario = scenario
        self.mode = mode
        self.rng = rng
        self.dtype = dtype

    def __call__(self, state: SystemState) -> list:
        return ag.decide(self.params, self.scenario.encode(state), self.mode, self.rng, self.dtype).action


@dataclass
class EvalResult:
    profits: list
    served: list
    labels: list

    @property
    def mean_profit(self) -> float:
        return float(np.mean(self.profits)) if self.profits else 0.0


def evaluate_policy(make_policy: Callable, episodes: Sequence[Episode], scenario: Scenario) -> EvalResult:
    """Closed episode profit (run-out included) per episode."""
    profits, served, labels = [], [], []
    for ep in episodes:
        res = run_episode(make_policy(ep), ep.steps, scenario.graph, scenario.prices, scenario.episode, ep.fleet)
        profits.append(res.profit)
        served.append(res.served_share)
        labels.append(ep.label)
    return EvalResult(profits, served, labels)


def evaluate(params, episodes: Sequence[Episode], scenario: Scenario) -> EvalResult:
    return evaluate_policy(lambda ep: RLPolicy(params, scenario), episodes, scenario)


# --------------------------------------------------------------------------
# training loop


METRIC_FIELDS = ("env_step", "loss_actor", "loss_critic1", "loss_critic2", "buffer_size",
                 "validation_mean_profit", "wall_time")


@dataclass
class TrainResult:
    state: TrainState
    metrics: list
    seed: int


def _generators(seed: int):
    env, policy, init, batch = np.random.SeedSequence(seed).spawn(4)
    return {"env": np.random.default_rng(env), "policy": np.random.default_rng(policy),
            "init": np.random.default_rng(init), "batch": np.random.default_rng(batch)}


def _save_resume(path: Path, payload: dict) -> None:
    tmp = path.with_suffix(".tmp")
    with tmp.open("wb") as fh:
        pickle.dump(payload, fh, protocol=pickle.HIGHEST_PROTOCOL)
    tmp.replace(path)


def write_metrics(path, rows: Sequence[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row.get(k) is None else row[k]) for k in METRIC_FIELDS})


def train(scenario: Scenario, config: SACConfig, seed: int = 0, out_dir=None, resume: bool = False,
          log: Optional[Callable] = None) -> TrainResult:
    """Run the full schedule: warm-up, periodic updates, periodic validation."""
    out = Path(out_dir) if out_dir is not None else None
    resume_path = out / "resume.pkl" if out is not None else None
    if resume and resume_path is not None and resume_path.exists():
        with resume_path.open("rb") as fh:
            saved = pickle.load(fh)
        ts, buffer_items, rngs, metrics, buf_state = (saved["state"], saved["buffer"], saved["rngs"],
                                                      saved["metrics"], saved["buffer_state"])
        buffer = ReplayBuffer(config.buffer_capacity, scenario.encode)
        buffer.items = buffer_items
        buffer.head, buffer._shift, buffer._n, buffer._s1, buffer._s2 = buf_state
    else:
        rngs = _generators(seed)
        ts = TrainState.fresh(config, rngs["init"])
        buffer = ReplayBuffer(config.buffer_capacity, scenario.encode)
        metrics = []
    start = time.perf_counter() - (metrics[-1]["wall_time"] if metrics else 0.0)
    T = scenario.episode.horizon

    def validate() -> float:
        return evaluate(ts.actor, scenario.validation, scenario).mean_profit if scenario.validation else float("nan")

    while ts.env_step < config.total_steps:
        ep = scenario.sample_train(rngs["env"])
        batches, rid = [], 0
        for t in range(T):
            pairs = ep.steps[t] if t < len(ep.steps) else ()
            batches.append(requests_from_pairs(scenario.graph, pairs, t, rid))
            rid += len(pairs)
        state = initial_state(ep.fleet, batches[0])
        for t in range(T):
            feats = scenario.encode(state)
            if ts.env_step < config.warmup_steps:
                decision = ag.random_decide(feats, rngs["policy"])
            else:
                decision = ag.decide(ts.actor.arrays(), feats, "train", rngs["policy"])
            rewards = ag.per_agent_rewards(state, decision.action, scenario.graph, scenario.prices,
                                           scenario.episode.max_wait)
            incoming = batches[t + 1] if t + 1 < T else ()
            _, nxt, _ = step(state, decision.action, incoming, scenario.graph, scenario.prices, scenario.episode)
            store_transition(buffer, state, decision.action, rewards, nxt, t == T - 1, feats)
            state = nxt
            ts.env_step += 1
            row = None
            if (ts.env_step > config.warmup_steps and ts.env_step % config.update_every == 0
                    and len(buffer) >= config.batch_size):
                batch = sample_batch(buffer, rngs["batch"], config.batch_size)
                try:
                    la, l1, l2 = update(ts, batch, config, rngs["batch"])
                except TrainingDiverged as exc:
                    if out is not None:
                        out.mkdir(parents=True, exist_ok=True)
                        (out / "diverged.json").write_text(json.dumps(
                            {"env_step": ts.env_step, "error": str(exc), "updates": ts.updates}))
                    raise
                row = {"env_step": ts.env_step, "loss_actor": la, "loss_critic1": l1, "loss_critic2": l2}
            if ts.env_step % config.validate_every == 0:
                value = validate()
                row = row or {"env_step": ts.env_step}
                row["validation_mean_profit"] = value
                if value > ts.best_validation:
                    ts.best_validation, ts.best_step = value, ts.env_step
                    ts.best_actor = {k: v.copy() for k, v in ts.actor.arrays().items()}
                if log:
                    log(f"seed {seed} step {ts.env_step}: validation mean profit {value:.3f}")
            if row is not None:
                row["buffer_size"] = len(buffer)
                row["wall_time"] = time.perf_counter() - start
                metrics.append(row)
            if ts.env_step >= config.total_steps:
                break
        ts.episode += 1
        if resume_path is not None and config.checkpoint_every and ts.episode % config.checkpoint_every == 0:
            out.mkdir(parents=True, exist_ok=True)
            _save_resume(resume_path, {"state": ts, "buffer": buffer.items, "rngs": rngs, "metrics": metrics,
                                       "buffer_state": (buffer.head, buffer._shift, buffer._n, buffer._s1,
                                                        buffer._s2)})
    if ts.best_actor is None:
        ts.best_actor = {k: v.copy() for k, v in ts.actor.arrays().items()}
        ts.best_step = ts.env_step
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(out / "metrics.csv", metrics)
        save_actor(out / "best_actor.ckpt", ts.best_actor, config,
                   {"seed": seed, "env_step": ts.best_step, "validation": ts.best_validation})
    return TrainResult(ts, metrics, seed)


def save_actor(path, arrays: dict, config: SACConfig, extra: Optional[dict] = None) -> None:
    meta = {"kind": "actor", "shape": {"embed": config.shape.embed,
                                        "request_attention": config.shape.request_attention,
                                        "vehicle_attention": config.shape.vehicle_attention,
                                        "trunk": list(config.shape.trunk)}}
    meta.update(extra or {})
    nn.save_checkpoint(path, arrays, meta)


def load_actor(path) -> tuple:
    arrays, meta = nn.load_checkpoint(path)
    if meta.get("kind") != "actor":
        raise nn.CheckpointError(f"{path} is not an actor checkpoint")
    return arrays, meta


def save_train_state(path, ts: TrainState) -> None:
    """Actor, critics, targets and optimiser moments in one checkpoint file."""
    tensors, meta = {}, {"env_step": ts.env_step, "updates": ts.updates, "adam_steps": {}}
    groups = {"actor": (ts.actor, ts.actor_opt), "critic1": (ts.critics[0], ts.critic_opts[0]),
              "critic2": (ts.critics[1], ts.critic_opts[1])}
    for name, (params, opt) in groups.items():
        for k, v in params.arrays().items():
            tensors[f"{name}:{k}"] = v
        for k, v in opt.m.items():
            tensors[f"{name}.m:{k}"] = v
            tensors[f"{name}.v:{k}"] = opt.v[k]
        meta["adam_steps"][name] = opt.step
    for n, t in enumerate(ts.targets, 1):
        for k, v in t.arrays().items():
            tensors[f"target{n}:{k}"] = v
    nn.save_checkpoint(path, tensors, meta)


def load_train_state(path, config: SACConfig) -> TrainState:
    tensors, meta = nn.load_checkpoint(path)

    def params(prefix):
        return nn.ParameterSet({k.split(":", 1)[1]: v for k, v in tensors.items() if k.startswith(prefix + ":")})

    def opt(prefix):
        st = nn.AdamState(lr=config.learning_rate, step=meta["adam_steps"][prefix])
        st.m = {k.split(":", 1)[1]: v for k, v in tensors.items() if k.startswith(prefix + ".m:")}
        st.v = {k.split(":", 1)[1]: v for k, v in tensors.items() if k.startswith(prefix + ".v:")}
        return st

    return TrainState(params("actor"), [params("critic1"), params("critic2")],
                      [params("target1"), params("target2")], opt("actor"), [opt("critic1"), opt("critic2")],
                      env_step=meta["env_step"], updates=meta["updates"])
