"""Request-vehicle agents: features, actor/critic networks, post-processing
and the global matching step.

Every (request, vehicle) pair of a state is one agent.  The actor maps an
agent to a (reject, accept) distribution; accepted agents become weighted
edges of a bipartite graph whose maximum-weight matching is the action.

Two forward implementations exist.  The taped one (``actor_logits`` /
``critic_values``) runs on batches of states and supports gradients.  The
inference one (``actor_accept_probs``) runs on a single state with plain
numpy, deduplicates vehicles that are indistinguishable to the network and
splits the first trunk layer by input block, which keeps decisions for
thousands of vehicles affordable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import neural as nn
from .matching import ScoredBipartiteGraph, solve_matching
from .world import (REJECT, PricingModel, SystemState, ZoneGraph, commitment,
                    deterministic_service_profit)

REQUEST_DIM = 5
VEHICLE_DIM = 4
CONTEXT_DIM = 4  # time, deadline flag, fleet busyness, demand ratio


@dataclass(frozen=True)
class NetworkShape:
    embed: int = 32
    request_attention: int = 256
    vehicle_attention: int = 128
    trunk: tuple = (1024, 512, 128, 32, 8)

    @property
    def actor_input(self) -> int:
        return 4 * self.embed + CONTEXT_DIM

    @property
    def critic_input(self) -> int:
        return 2 * self.embed + REQUEST_DIM + VEHICLE_DIM + CONTEXT_DIM


# --------------------------------------------------------------------------
# features


@dataclass(frozen=True)
class FeatureScales:
    x0: float
    y0: float
    width: float
    height: float
    distance: float
    tau_cap: float
    horizon: int

    @classmethod
    def from_graph(cls, graph: ZoneGraph, horizon: int, tau_cap: Optional[float] = None) -> "FeatureScales":
        lo = graph.coords.min(axis=0)
        hi = graph.coords.max(axis=0)
        cap = tau_cap if tau_cap is not None else 2 * graph.diameter_time
        return cls(float(lo[0]), float(lo[1]), float(hi[0] - lo[0]), float(hi[1] - lo[1]),
                   graph.diameter_distance, float(max(cap, 1)), int(horizon))

    def xy(self, coords: np.ndarray) -> np.ndarray:
        out = np.zeros_like(coords, dtype=float)
        if self.width > 0:
            out[..., 0] = (coords[..., 0] - self.x0) / self.width
        if self.height > 0:
            out[..., 1] = (coords[..., 1] - self.y0) / self.height
        return out


@dataclass
class StateFeatures:
    requests: np.ndarray     # (R, 5)
    vehicles: np.ndarray     # (K, 4)
    od: np.ndarray           # (R, 4) normalised origin and destination coordinates
    feasible: np.ndarray     # (R, K) bool, deadline can be met
    full: np.ndarray         # (K,) bool, second slot occupied
    vehicle_key: np.ndarray  # (K, 3) int: end node, steps until free, assigned count
    time: float
    busyness: float
    demand_ratio: float

    @property
    def n_requests(self) -> int:
        return len(self.requests)

    @property
    def n_vehicles(self) -> int:
        return len(self.vehicles)

    def agent_context(self, i: int, j: int) -> np.ndarray:
        return np.array([self.time, float(self.feasible[i, j]), self.busyness, self.demand_ratio])

    def context_matrix(self) -> np.ndarray:
        """(R*K, 4) agent context rows in row-major (request, vehicle) order."""
        R, K = self.feasible.shape
        ctx = np.empty((R * K, CONTEXT_DIM))
        ctx[:, 0] = self.time
        ctx[:, 1] = self.feasible.reshape(-1)
        ctx[:, 2] = self.busyness
        ctx[:, 3] = self.demand_ratio
        return ctx


def encode_state(state: SystemState, graph: ZoneGraph, scales: FeatureScales,
                 profile=None, max_wait: int = 5) -> StateFeatures:
    R, K = state.n_requests, state.n_vehicles
    xy = scales.xy(graph.coords)

    commits = [commitment(v, graph) for v in state.fleet]
    ends = np.array([c.end_node for c in commits], dtype=np.int64)
    free = np.array([c.free_in for c in commits], dtype=np.int64)
    counts = np.array([v.n_assigned for v in state.fleet], dtype=np.int64)
    vehicles = np.empty((K, VEHICLE_DIM))
    vehicles[:, 0:2] = xy[ends]
    vehicles[:, 2] = np.minimum(free / scales.tau_cap, 1.0)
    vehicles[:, 3] = counts / 2.0

    origins = np.array([r.origin for r in state.requests], dtype=np.int64)
    dests = np.array([r.destination for r in state.requests], dtype=np.int64)
    waits = np.array([r.wait for r in state.requests], dtype=np.int64)
    requests = np.empty((R, REQUEST_DIM))
    od = np.empty((R, 4))
    if R:
        od[:, 0:2] = xy[origins]
        od[:, 2:4] = xy[dests]
        requests[:, 0:4] = od
        trip = np.array([r.trip_distance for r in state.requests])
        requests[:, 4] = np.minimum(trip / scales.distance, 1.0)
        travel = graph.travel_time[ends[None, :], origins[:, None]]
        feasible = (waits[:, None] + free[None, :] + travel) <= max_wait
    else:
        feasible = np.zeros((0, K), dtype=bool)

    busy = float(min(free.sum() / (K * scales.tau_cap), 1.0)) if K else 0.0
    if profile is not None:
        expected = profile.expected_by(state.t)
        ratio = state.placed_so_far / expected if expected > 0 else 1.0
    else:
        ratio = 1.0
    full = np.array([v.full for v in state.fleet], dtype=bool)
    return StateFeatures(requests, vehicles, od, feasible, full,
                         np.stack([ends, free, counts], axis=1) if K else np.zeros((0, 3), np.int64),
                         min(state.t / max(scales.horizon, 1), 1.0), busy, float(ratio))


# --------------------------------------------------------------------------
# parameters


def _dense(params: nn.ParameterSet, name, fan_in, fan_out, rng):
    params.add(f"{name}/W", nn.glorot(rng, fan_in, fan_out))
    params.add(f"{name}/b", np.zeros(fan_out))


def _attention(params: nn.ParameterSet, name, embed, width, rng):
    params.add(f"{name}/W", nn.glorot(rng, embed, width))
    params.add(f"{name}/w", nn.glorot(rng, width, 1, shape=(width,)))


def _trunk(params: nn.ParameterSet, shape: NetworkShape, fan_in: int, rng):
    for k, width in enumerate(shape.trunk):
        _dense(params, f"trunk{k}", fan_in, width, rng)
        fan_in = width
    _dense(params, "out", fan_in, 2, rng)


def init_actor(shape: NetworkShape, rng: np.random.Generator) -> nn.ParameterSet:
    p = nn.ParameterSet()
    _dense(p, "req_embed", REQUEST_DIM, shape.embed, rng)
    _dense(p, "veh_embed", VEHICLE_DIM, shape.embed, rng)
    _attention(p, "req_attn", shape.embed, shape.request_attention, rng)
    _attention(p, "veh_attn", shape.embed, shape.vehicle_attention, rng)
    _trunk(p, shape, shape.actor_input, rng)
    return p


def init_critic(shape: NetworkShape, rng: np.random.Generator) -> nn.ParameterSet:
    p = nn.ParameterSet()
    _dense(p, "req_embed", REQUEST_DIM + 1, shape.embed, rng)
    _dense(p, "veh_embed", VEHICLE_DIM + 4, shape.embed, rng)
    _attention(p, "req_attn", shape.embed, shape.request_attention, rng)
    _attention(p, "veh_attn", shape.embed, shape.vehicle_attention, rng)
    _trunk(p, shape, shape.critic_input, rng)
    return p


def n_trunk_layers(params) -> int:
    k = 0
    while f"trunk{k}/W" in params:
        k += 1
    return k


# --------------------------------------------------------------------------
# batched, differentiable forward passes


@dataclass
class AgentBatch:
    """Requests, vehicles and agents of several states stacked row-wise."""

    requests: np.ndarray
    vehicles: np.ndarray
    od: np.ndarray
    req_state: np.ndarray
    veh_state: np.ndarray
    n_states: int
    agent_state: np.ndarray
    agent_req: np.ndarray     # global request row
    agent_veh: np.ndarray     # global vehicle row
    agent_i: np.ndarray       # request index within its state
    agent_j: np.ndarray       # vehicle index within its state
    agent_context: np.ndarray
    req_offset: np.ndarray
    veh_offset: np.ndarray


def build_batch(features: Sequence[StateFeatures], open_only: bool = False) -> AgentBatch:
    """Stack states; with ``open_only`` agents whose vehicle is full are left out."""
    n_req = [f.n_requests for f in features]
    n_veh = [f.n_vehicles for f in features]
    req_offset = np.concatenate([[0], np.cumsum(n_req)]).astype(np.int64)
    veh_offset = np.concatenate([[0], np.cumsum(n_veh)]).astype(np.int64)
    a_state, a_i, a_j, ctx = [], [], [], []
    for b, f in enumerate(features):
        R, K = f.feasible.shape
        if R == 0 or K == 0:
            continue
        ii, jj = np.meshgrid(np.arange(R), np.arange(K), indexing="ij")
        ii, jj = ii.reshape(-1), jj.reshape(-1)
        c = f.context_matrix()
        if open_only:
            keep = ~f.full[jj]
            ii, jj, c = ii[keep], jj[keep], c[keep]
        a_state.append(np.full(len(ii), b))
        a_i.append(ii)
        a_j.append(jj)
        ctx.append(c)
    cat = (lambda xs, dt=np.int64: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt))
    agent_state, agent_i, agent_j = cat(a_state), cat(a_i), cat(a_j)
    dim = lambda d: (lambda xs: np.concatenate(xs) if xs else np.zeros((0, d)))
    return AgentBatch(
        requests=dim(REQUEST_DIM)([f.requests for f in features]),
        vehicles=dim(VEHICLE_DIM)([f.vehicles for f in features]),
        od=dim(4)([f.od for f in features]),
        req_state=np.repeat(np.arange(len(features)), n_req),
        veh_state=np.repeat(np.arange(len(features)), n_veh),
        n_states=len(features),
        agent_state=agent_state,
        agent_req=req_offset[agent_state] + agent_i if len(agent_state) else agent_i,
        agent_veh=veh_offset[agent_state] + agent_j if len(agent_state) else agent_j,
        agent_i=agent_i,
        agent_j=agent_j,
        agent_context=np.concatenate(ctx) if ctx else np.zeros((0, CONTEXT_DIM)),
        req_offset=req_offset,
        veh_offset=veh_offset,
    )


def _embed_and_weigh(p, prefix_embed, prefix_attn, x):
    e = nn.relu(nn.affine(x, p[f"{prefix_embed}/W"], p[f"{prefix_embed}/b"]))
    beta = nn.sigmoid(nn.tanh(e @ p[f"{prefix_attn}/W"]) @ p[f"{prefix_attn}/w"])
    return e, beta


def _run_trunk(p, x):
    for k in range(n_trunk_layers(p)):
        x = nn.relu(nn.affine(x, p[f"trunk{k}/W"], p[f"trunk{k}/b"]))
    return nn.affine(x, p["out/W"], p["out/b"])


def _segment_mask(segments, n_segments):
    mask = np.zeros((n_segments, len(segments)))
    mask[segments, np.arange(len(segments))] = 1.0
    return mask


def attention_context(embeddings, W, w) -> np.ndarray:
    """sum_i sigmoid(w . tanh(W e_i)) e_i over a (possibly empty) set of embeddings.

    ``W`` is stored as (embed, width) so the row-vector form e @ W is used.
    """
    embeddings = np.asarray(embeddings, dtype=float).reshape(-1, np.shape(W)[0])
    if len(embeddings) == 0:
        return np.zeros(np.shape(W)[0])
    beta = nn._sigmoid(np.tanh(embeddings @ W) @ w)
    return beta @ embeddings


def actor_logits(p, batch: AgentBatch) -> nn.Tensor:
    er, br = _embed_and_weigh(p, "req_embed", "req_attn", batch.requests)
    ek, bk = _embed_and_weigh(p, "veh_embed", "veh_attn", batch.vehicles)
    cr = nn.segment_matmul(_segment_mask(batch.req_state, batch.n_states), _rowscale(er, br))
    ck = nn.segment_matmul(_segment_mask(batch.veh_state, batch.n_states), _rowscale(ek, bk))
    x = nn.concat([
        nn.gather_rows(cr, batch.agent_state),
        nn.gather_rows(ck, batch.agent_state),
        nn.gather_rows(er, batch.agent_req),
        nn.gather_rows(ek, batch.agent_veh),
        nn.Tensor(batch.agent_context),
    ])
    return _run_trunk(p, x)


def _rowscale(x: nn.Tensor, w: nn.Tensor) -> nn.Tensor:
    """Scale row r of x by w[r]."""
    return nn.mul(x, _column(w))


def _column(w: nn.Tensor) -> nn.Tensor:
    out = w.data[:, None]
    if not w.requires_grad:
        return nn.Tensor(out)
    return nn.Tensor(out, True, (w,), lambda g: (g[:, 0],), "column")


def action_annotations(batch: AgentBatch, actions: Sequence[Sequence[int]]):
    """Request accepted flags (sum R, 1) and vehicle new-assignment OD (sum K, 4)."""
    flags = np.zeros((len(batch.requests), 1))
    veh_od = np.zeros((len(batch.vehicles), 4))
    for b, action in enumerate(actions):
        r0, v0 = batch.req_offset[b], batch.veh_offset[b]
        for i, a in enumerate(action):
            if a != REJECT:
                flags[r0 + i, 0] = 1.0
                veh_od[v0 + a] = batch.od[r0 + i]
    return flags, veh_od


def _exclusive_mask(segments):
    """Same-segment, not-self indicator: row r sums every other row of its segment."""
    same = segments[:, None] == segments[None, :]
    np.fill_diagonal(same, False)
    return same.astype(float)


def critic_values(p, batch: AgentBatch, actions: Sequence[Sequence[int]]) -> nn.Tensor:
    """Q values (n_agents, 2) given the global actions of each state.

    The agent's own request and vehicle are left out of the attention
    contexts, which removes the agent's own action from the input.
    """
    flags, veh_od = action_annotations(batch, actions)
    req_in = np.concatenate([batch.requests, flags], axis=1)
    veh_in = np.concatenate([batch.vehicles, veh_od], axis=1)
    er, br = _embed_and_weigh(p, "req_embed", "req_attn", req_in)
    ek, bk = _embed_and_weigh(p, "veh_embed", "veh_attn", veh_in)
    cr = nn.segment_matmul(_exclusive_mask(batch.req_state), _rowscale(er, br))
    ck = nn.segment_matmul(_exclusive_mask(batch.veh_state), _rowscale(ek, bk))
    x = nn.concat([
        nn.gather_rows(cr, batch.agent_req),
        nn.gather_rows(ck, batch.agent_veh),
        nn.Tensor(batch.requests[batch.agent_req]),
        nn.Tensor(batch.vehicles[batch.agent_veh]),
        nn.Tensor(batch.agent_context),
    ])
    return _run_trunk(p, x)


def constants(params: nn.ParameterSet) -> dict:
    """Gradient-free view of a parameter set."""
    return {k: nn.Tensor(t.data) for k, t in params.tensors.items()}


# --------------------------------------------------------------------------
# single-state inference


def _np_params(params, dtype):
    arrays = params.arrays() if isinstance(params, nn.ParameterSet) else params
    return {k: np.asarray(v, dtype=dtype) for k, v in arrays.items()}


def actor_accept_probs(params, feats: StateFeatures, vehicles: Optional[np.ndarray] = None,
                       dtype=np.float64, chunk_rows: int = 16384) -> np.ndarray:
    """(R, K) accept probabilities for one state (reject = 1 - accept).

    Only the listed ``vehicles`` columns are evaluated; others are left at 0.
    """
    R, K = feats.feasible.shape
    out = np.zeros((R, K))
    if R == 0 or K == 0:
        return out
    P = _np_params(params, dtype)
    relu = lambda z: np.maximum(z, 0)
    E = P["req_embed/W"].shape[1]
    er = relu(feats.requests.astype(dtype) @ P["req_embed/W"] + P["req_embed/b"])
    ek = relu(feats.vehicles.astype(dtype) @ P["veh_embed/W"] + P["veh_embed/b"])
    br = nn._sigmoid(np.tanh(er @ P["req_attn/W"]) @ P["req_attn/w"])
    bk = nn._sigmoid(np.tanh(ek @ P["veh_attn/W"]) @ P["veh_attn/w"])
    cr, ck = br @ er, bk @ ek

    cols = np.arange(K) if vehicles is None else np.asarray(vehicles, dtype=np.int64)
    if len(cols) == 0:
        return out
    # vehicles with equal (end, free, count) have equal encodings and deadline flags
    keys = feats.vehicle_key[cols]
    uniq, first, group = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    group = group.reshape(-1)
    reps = cols[first]

    W1 = P["trunk0/W"]
    w_time, w_flag, w_busy, w_dem = (W1[4 * E + k] for k in range(4))
    base = (cr @ W1[0:E] + ck @ W1[E:2 * E] + P["trunk0/b"]
            + feats.time * w_time + feats.busyness * w_busy + feats.demand_ratio * w_dem)
    req_part = er @ W1[2 * E:3 * E] + base              # (R, H)
    veh_part = ek[reps] @ W1[3 * E:4 * E]               # (U, H)
    flags = feats.feasible[:, reps].astype(dtype)       # (R, U)

    U = len(reps)
    n_layers = n_trunk_layers(P)
    rows_i = np.repeat(np.arange(R), U)
    rows_u = np.tile(np.arange(U), R)
    probs = np.empty(R * U)
    for s in range(0, R * U, chunk_rows):
        ii, uu = rows_i[s:s + chunk_rows], rows_u[s:s + chunk_rows]
        h = req_part[ii] + veh_part[uu]
        h += flags[ii, uu][:, None] * w_flag
        np.maximum(h, 0, out=h)
        for k in range(1, n_layers):
            h = relu(h @ P[f"trunk{k}/W"] + P[f"trunk{k}/b"])
        logits = h @ P["out/W"] + P["out/b"]
        probs[s:s + chunk_rows] = nn._sigmoid((logits[:, 1] - logits[:, 0]).astype(np.float64))
    probs = probs.reshape(R, U)
    out[:, cols] = probs[:, group]
    return out


def actor_forward(params, feats: StateFeatures) -> np.ndarray:
    """(R, K, 2) matrix of (p_reject, p_accept) for all agents of a state."""
    pa = actor_accept_probs(params, feats)
    return np.stack([1.0 - pa, pa], axis=-1)


# --------------------------------------------------------------------------
# post-processing, global decision, rewards


@dataclass(frozen=True)
class PostProcessOutcome:
    delta: int
    score: float


def post_process(p_reject: float, p_accept: float, vehicle_full: bool, mode: str = "test",
                 rng: Optional[np.random.Generator] = None) -> PostProcessOutcome:
    """Mask, then sample (train) or take the argmax (test, ties reject)."""
    if vehicle_full:
        p_reject, p_accept = 1.0, 0.0
    if mode == "train":
        delta = int(rng.random() < p_accept)
    elif mode == "test":
        delta = int(p_reject < p_accept)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return PostProcessOutcome(delta, p_accept if delta else 0.0)


def post_process_matrix(p_accept: np.ndarray, full: np.ndarray, mode: str,
                        rng: Optional[np.random.Generator] = None):
    """Vectorised post-processing over an (R, K) accept-probability matrix."""
    pa = np.where(full[None, :], 0.0, p_accept)
    if mode == "train":
        delta = rng.random(pa.shape) < pa
    elif mode == "test":
        delta = (1.0 - pa) < pa
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return delta, np.where(delta, pa, 0.0)


def match_scores(scores: np.ndarray) -> list:
    """Action vector from a score matrix via maximum-weight matching."""
    R = scores.shape[0]
    if R == 0:
        return []
    assignment = solve_matching(ScoredBipartiteGraph.from_scores(scores))
    return assignment.vehicle_of(R)


@dataclass
class Decision:
    action: list
    scores: np.ndarray
    delta: np.ndarray
    accept_probs: np.ndarray


def decide(params, feats: StateFeatures, mode: str = "test", rng=None, dtype=np.float64) -> Decision:
    open_cols = np.flatnonzero(~feats.full)
    pa = actor_accept_probs(params, feats, vehicles=open_cols, dtype=dtype)
    delta, scores = post_process_matrix(pa, feats.full, mode, rng)
    return Decision(match_scores(scores), scores, delta, pa)


def random_decide(feats: StateFeatures, rng: np.random.Generator) -> Decision:
    """Warm-up policy: every agent accepts with probability one half."""
    pa = np.full(feats.feasible.shape, 0.5)
    delta, scores = post_process_matrix(pa, feats.full, "train", rng)
    return Decision(match_scores(scores), scores, delta, pa)


def per_agent_rewards(state: SystemState, action: Sequence[int], graph: ZoneGraph,
                      prices: PricingModel, max_wait: int) -> np.ndarray:
    """(R, K) rewards: the matched agent gets its deterministic service profit."""
    rewards = np.zeros((state.n_requests, state.n_vehicles))
    for i, j in enumerate(action):
        if j != REJECT:
            rewards[i, j], _ = deterministic_service_profit(
                state.fleet[j], state.requests[i], graph, prices, max_wait)
    return rewards


def critic_forward(params, feats: StateFeatures, action: Sequence[int], agent) -> np.ndarray:
    """Q (reject, accept) of one agent (i, j) given the global action."""
    i, j = agent
    batch = build_batch([feats])
    p = constants(params) if isinstance(params, nn.ParameterSet) else {k: nn.Tensor(v) for k, v in params.items()}
    q = critic_values(p, batch, [action]).data
    row = i * feats.n_vehicles + j
    return q[row]


def critic_input_rows(params, feats: StateFeatures, action: Sequence[int]) -> np.ndarray:
    """Trunk input of every agent; exposes the centralised-critic channel for tests."""
    batch = build_batch([feats])
    flags, veh_od = action_annotations(batch, [action])
    p = constants(params) if isinstance(params, nn.ParameterSet) else params
    er, br = _embed_and_weigh(p, "req_embed", "req_attn", np.concatenate([batch.requests, flags], 1))
    ek, bk = _embed_and_weigh(p, "veh_embed", "veh_attn", np.concatenate([batch.vehicles, veh_od], 1))
    cr = _exclusive_mask(batch.req_state) @ (er.data * br.data[:, None])
    ck = _exclusive_mask(batch.veh_state) @ (ek.data * bk.data[:, None])
    return np.concatenate([cr[batch.agent_req], ck[batch.agent_veh], batch.requests[batch.agent_req],
                           batch.vehicles[batch.agent_veh], batch.agent_context], axis=1)
