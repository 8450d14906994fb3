"""Discrete-time dispatching environment.

The world is a zone graph traversed by a fleet of vehicles.  Each step the
operator receives a batch of new requests and either rejects each one or
assigns it to a vehicle with a free slot.  Revenue is booked when a vehicle
picks a customer up within the maximum waiting time, cost is charged per
kilometre whenever a vehicle starts traversing an edge.

Vehicles are indexed from 0 internally; ``REJECT`` (-1) marks a rejected
request in an action vector.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

REJECT = -1


class ActionShapeError(ValueError):
    """Raised when an action vector does not have one entry per request."""


class InvalidActionError(ValueError):
    """Raised when an action violates the feasibility constraints."""


# --------------------------------------------------------------------------
# graph


class ZoneGraph:
    """Zone graph with distance (km) and traversal-time (steps) edge weights.

    Routing follows the fastest path, ties broken by shorter distance and
    then by the lowest next-node index.  All tables are computed once and are
    read-only afterwards.
    """

    def __init__(self, coords, edges, ids=None, directed=False):
        coords = np.asarray(coords, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError("coords must have shape (n, 2)")
        self.n_nodes = len(coords)
        self.coords = coords
        self.ids = list(ids) if ids is not None else list(range(self.n_nodes))
        self.edge_distance: dict[tuple[int, int], float] = {}
        self.edge_time: dict[tuple[int, int], int] = {}
        for u, v, dist, steps in edges:
            u, v = int(u), int(v)
            if u == v:
                raise ValueError(f"self loop at node {u}")
            if not dist > 0:
                raise ValueError(f"edge ({u}, {v}) has non-positive distance {dist}")
            if int(steps) != steps or steps < 1:
                raise ValueError(f"edge ({u}, {v}) needs a whole number of steps >= 1, got {steps}")
            pairs = [(u, v)] if directed else [(u, v), (v, u)]
            for a, b in pairs:
                self.edge_distance[(a, b)] = float(dist)
                self.edge_time[(a, b)] = int(steps)
        self.neighbors: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for a, b in sorted(self.edge_distance):
            self.neighbors[a].append(b)
        self._build_tables()
        self._node_key = id(self)

    # -- construction helpers ---------------------------------------------

    @classmethod
    def line(cls, n_nodes: int, distance_km: float = 1.0, time_steps: int = 1) -> "ZoneGraph":
        coords = [(float(i) * distance_km, 0.0) for i in range(n_nodes)]
        edges = [(i, i + 1, distance_km, time_steps) for i in range(n_nodes - 1)]
        return cls(coords, edges)

    @classmethod
    def from_dict(cls, doc: dict) -> "ZoneGraph":
        ids = [node["id"] for node in doc["nodes"]]
        index = {node_id: i for i, node_id in enumerate(ids)}
        coords = [(float(node["x"]), float(node["y"])) for node in doc["nodes"]]
        edges = [
            (index[e["u"]], index[e["v"]], float(e["distance_km"]), int(e["time_steps"]))
            for e in doc["edges"]
        ]
        return cls(coords, edges, ids=ids, directed=bool(doc.get("directed", False)))

    @classmethod
    def load(cls, path) -> "ZoneGraph":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        nodes = [
            {"id": self.ids[i], "x": float(x), "y": float(y)}
            for i, (x, y) in enumerate(self.coords)
        ]
        edges = [
            {"u": self.ids[u], "v": self.ids[v], "distance_km": d, "time_steps": self.edge_time[(u, v)]}
            for (u, v), d in sorted(self.edge_distance.items())
        ]
        return {"nodes": nodes, "edges": edges, "directed": True}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    # -- tables -------------------------------------------------------------

    def _dijkstra(self, source: int, lexicographic: bool):
        n = self.n_nodes
        best = [None] * n
        heap = [((0, 0.0) if lexicographic else (0.0,), source)]
        while heap:
            key, u = heapq.heappop(heap)
            if best[u] is not None:
                continue
            best[u] = key
            for v in self.neighbors[u]:
                if best[v] is not None:
                    continue
                d = self.edge_distance[(u, v)]
                if lexicographic:
                    cand = (key[0] + self.edge_time[(u, v)], key[1] + d)
                else:
                    cand = (key[0] + d,)
                heapq.heappush(heap, (cand, v))
        return best

    def _build_tables(self) -> None:
        n = self.n_nodes
        fast_time = np.zeros((n, n), dtype=np.int64)
        fast_dist = np.zeros((n, n))
        short_dist = np.zeros((n, n))
        for s in range(n):
            lex = self._dijkstra(s, lexicographic=True)
            if any(k is None for k in lex):
                raise ValueError("zone graph is not strongly connected")
            fast_time[s] = [k[0] for k in lex]
            fast_dist[s] = [k[1] for k in lex]
            short_dist[s] = [k[0] for k in self._dijkstra(s, lexicographic=False)[:]]

        next_hop = np.full((n, n), -1, dtype=np.int64)
        for u in range(n):
            best_t = np.full(n, np.iinfo(np.int64).max)
            best_d = np.full(n, np.inf)
            hop = np.full(n, -1, dtype=np.int64)
            for w in self.neighbors[u]:  # ascending node index
                t = self.edge_time[(u, w)] + fast_time[w]
                d = np.round(self.edge_distance[(u, w)] + fast_dist[w], 9)
                better = (t < best_t) | ((t == best_t) & (d < best_d))
                best_t = np.where(better, t, best_t)
                best_d = np.where(better, d, best_d)
                hop = np.where(better, w, hop)
            hop[u] = -1
            next_hop[u] = hop

        route_dist = np.zeros((n, n))
        route_time = np.zeros((n, n), dtype=np.int64)
        for u in range(n):
            for v in range(n):
                node, dist, steps = u, 0.0, 0
                while node != v:
                    nxt = int(next_hop[node, v])
                    dist += self.edge_distance[(node, nxt)]
                    steps += self.edge_time[(node, nxt)]
                    node = nxt
                route_dist[u, v] = dist
                route_time[u, v] = steps

        for arr in (route_time, route_dist, short_dist, next_hop):
            arr.flags.writeable = False
        self.travel_time = route_time
        self.route_distance = route_dist
        self.shortest_distance = short_dist
        self.next_hop = next_hop
        self.diameter_distance = float(short_dist.max()) if n > 1 else 1.0
        self.diameter_time = int(route_time.max()) if n > 1 else 1

    def route(self, u: int, v: int) -> list[int]:
        path = [u]
        while path[-1] != v:
            path.append(int(self.next_hop[path[-1], v]))
        return path

    def __repr__(self) -> str:
        return f"ZoneGraph(n_nodes={self.n_nodes}, n_edges={len(self.edge_distance)})"

    # identity semantics so the graph can key caches
    def __hash__(self) -> int:
        return self._node_key

    def __eq__(self, other) -> bool:
        return self is other


# --------------------------------------------------------------------------
# state types


@dataclass(frozen=True, slots=True)
class Request:
    """A trip request.  ``wait`` is None once the customer has been picked up."""

    rid: int
    origin: int
    destination: int
    wait: Optional[int]
    placed_at: int
    trip_distance: float

    @property
    def picked_up(self) -> bool:
        return self.wait is None


def make_request(graph: ZoneGraph, rid: int, origin: int, destination: int, placed_at: int) -> Request:
    if origin == destination:
        raise ValueError("request origin and destination must differ")
    return Request(rid, int(origin), int(destination), 0, int(placed_at),
                   float(graph.shortest_distance[origin, destination]))


@dataclass(frozen=True, slots=True)
class Vehicle:
    position: int
    tau: int = 0
    r1: Optional[Request] = None
    r2: Optional[Request] = None

    @property
    def n_assigned(self) -> int:
        return (self.r1 is not None) + (self.r2 is not None)

    @property
    def full(self) -> bool:
        return self.r2 is not None


@dataclass(frozen=True, slots=True)
class SystemState:
    t: int
    requests: tuple
    fleet: tuple
    placed_so_far: int = 0

    @property
    def n_requests(self) -> int:
        return len(self.requests)

    @property
    def n_vehicles(self) -> int:
        return len(self.fleet)


@dataclass(frozen=True)
class PricingModel:
    revenue_per_km: float = 5.00
    cost_per_km: float = 4.50

    def __post_init__(self):
        if not (self.revenue_per_km > 0 and self.cost_per_km > 0):
            raise ValueError("revenue and cost rates must be positive")

    @property
    def margin(self) -> float:
        return (self.revenue_per_km - self.cost_per_km) / self.revenue_per_km


@dataclass(frozen=True)
class EpisodeConfig:
    horizon: int = 60
    max_wait: int = 5
    fleet_size: int = 10
    placement: str = "uniform"  # or "fixed"
    initial_positions: tuple = ()

    def __post_init__(self):
        if self.horizon < 1 or self.max_wait < 0 or self.fleet_size < 1:
            raise ValueError("invalid episode config")
        if self.placement not in ("uniform", "fixed"):
            raise ValueError(f"unknown placement rule {self.placement!r}")
        if self.placement == "fixed" and len(self.initial_positions) != self.fleet_size:
            raise ValueError("fixed placement needs one position per vehicle")


@dataclass
class StepOutcome:
    revenue: float = 0.0
    cost: float = 0.0
    events: list = field(default_factory=list)

    @property
    def profit(self) -> float:
        return self.revenue - self.cost


def initial_fleet(graph: ZoneGraph, config: EpisodeConfig, rng: np.random.Generator) -> tuple:
    if config.placement == "fixed":
        positions = [int(p) for p in config.initial_positions]
    else:
        positions = rng.integers(0, graph.n_nodes, size=config.fleet_size).tolist()
    return tuple(Vehicle(p) for p in positions)


def initial_state(fleet: Sequence[Vehicle], requests: Sequence[Request] = ()) -> SystemState:
    return SystemState(0, tuple(requests), tuple(fleet), len(requests))


# --------------------------------------------------------------------------
# actions


def action_violation(state: SystemState, action: Sequence[int]) -> Optional[str]:
    """Describe the first violated action constraint, or return None.

    A length mismatch is a structural error and raises ActionShapeError.
    """
    if len(action) != state.n_requests:
        raise ActionShapeError(
            f"action has {len(action)} entries for {state.n_requests} requests")
    seen = set()
    for i, a in enumerate(action):
        a = int(a)
        if a == REJECT:
            continue
        if not 0 <= a < state.n_vehicles:
            return f"request {i}: unknown vehicle {a}"
        if state.fleet[a].r2 is not None:
            return f"request {i}: slot occupied on vehicle {a}"
        if a in seen:
            return f"request {i}: vehicle multiply assigned ({a})"
        seen.add(a)
    return None


def validate_action(state: SystemState, action: Sequence[int]) -> None:
    problem = action_violation(state, action)
    if problem is not None:
        raise InvalidActionError(problem)


def apply_assignments(state: SystemState, action: Sequence[int]) -> SystemState:
    """Pre-decision to post-decision state.  Rejected requests leave the system."""
    validate_action(state, action)
    fleet = list(state.fleet)
    for i, a in enumerate(action):
        if a == REJECT:
            continue
        veh = fleet[a]
        req = state.requests[i]
        if veh.r1 is None:
            fleet[a] = replace(veh, r1=req)
        else:
            fleet[a] = replace(veh, r2=req)
    return replace(state, requests=(), fleet=tuple(fleet))


# --------------------------------------------------------------------------
# dynamics


def _target(veh: Vehicle) -> Optional[int]:
    r1 = veh.r1
    if r1 is None:
        return None
    if r1.wait is not None and veh.position != r1.origin:
        return r1.origin
    return r1.destination


def _advance_vehicle(veh: Vehicle, graph: ZoneGraph) -> Vehicle:
    v, tau, r1, r2 = veh.position, veh.tau, veh.r1, veh.r2
    # pickup
    if r1 is not None and tau == 0 and v == r1.origin and r1.wait is not None:
        r1 = replace(r1, wait=None)
    # travel along an edge, or start the next edge of the route
    if tau > 0:
        tau -= 1
    elif r1 is not None:
        target = r1.origin if r1.wait is not None else r1.destination
        if target != v:
            nxt = int(graph.next_hop[v, target])
            tau = graph.edge_time[(v, nxt)] - 1
            v = nxt
    # dropoff
    if r1 is not None and r1.wait is None and tau == 0 and v == r1.destination:
        r1, r2 = r2, None
    # waiting customers
    if r1 is not None and r1.wait is not None:
        r1 = replace(r1, wait=r1.wait + 1)
    if r2 is not None and r2.wait is not None:
        r2 = replace(r2, wait=r2.wait + 1)
    if v == veh.position and tau == veh.tau and r1 is veh.r1 and r2 is veh.r2:
        return veh
    return Vehicle(v, tau, r1, r2)


def step_profit(post_state: SystemState, graph: ZoneGraph, prices: PricingModel,
                max_wait: int) -> StepOutcome:
    """Revenue and cost triggered by a post-decision state."""
    out = StepOutcome()
    for j, veh in enumerate(post_state.fleet):
        r1 = veh.r1
        if r1 is None or veh.tau != 0:
            continue
        if r1.wait is not None and veh.position == r1.origin:
            if r1.wait <= max_wait:
                out.revenue += prices.revenue_per_km * r1.trip_distance
            out.events.append(("pickup", j, r1.rid, r1.wait))
        target = _target(veh)
        if target != veh.position:
            nxt = int(graph.next_hop[veh.position, target])
            dist = graph.edge_distance[(veh.position, nxt)]
            out.cost += prices.cost_per_km * dist
            out.events.append(("move", j, veh.position, nxt, dist))
    return out


def advance_dynamics(post_state: SystemState, incoming: Sequence[Request], graph: ZoneGraph) -> SystemState:
    fleet = tuple(_advance_vehicle(v, graph) for v in post_state.fleet)
    incoming = tuple(incoming)
    return SystemState(post_state.t + 1, incoming, fleet, post_state.placed_so_far + len(incoming))


def step(state: SystemState, action: Sequence[int], incoming: Sequence[Request], graph: ZoneGraph,
         prices: PricingModel, config: EpisodeConfig):
    """One environment transition: returns (reward, next_state, outcome)."""
    post = apply_assignments(state, action)
    outcome = step_profit(post, graph, prices, config.max_wait)
    return outcome.profit, advance_dynamics(post, incoming, graph), outcome


def fleet_busy(state: SystemState) -> bool:
    return any(v.r1 is not None or v.tau > 0 for v in state.fleet)


def run_out(state: SystemState, graph: ZoneGraph, prices: PricingModel, max_wait: int,
            max_steps: int = 100_000) -> float:
    """Profit of finishing every committed trip with no new requests."""
    total = 0.0
    post = replace(state, requests=())
    for _ in range(max_steps):
        if not any(v.r1 is not None for v in post.fleet):
            return total
        total += step_profit(post, graph, prices, max_wait).profit
        post = advance_dynamics(post, (), graph)
    raise RuntimeError("run-out did not terminate")


# --------------------------------------------------------------------------
# deterministic look-ahead of a single vehicle


class Commitment(NamedTuple):
    end_node: int        # where the vehicle idles after its committed trips
    free_in: int         # steps until it idles there
    drop_offsets: tuple  # steps until each committed request is dropped off


@lru_cache(maxsize=200_000)
def commitment(vehicle: Vehicle, graph: ZoneGraph) -> Commitment:
    """Simulate the vehicle forward with the environment dynamics."""
    drops = []
    veh, steps = vehicle, 0
    pending = [r.rid for r in (vehicle.r1, vehicle.r2) if r is not None]
    while veh.r1 is not None or veh.tau > 0:
        veh = _advance_vehicle(veh, graph)
        steps += 1
        held = {r.rid for r in (veh.r1, veh.r2) if r is not None}
        while pending and pending[0] not in held:
            pending.pop(0)
            drops.append(steps)
        if steps > 10_000_000:
            raise RuntimeError("vehicle route does not terminate")
    return Commitment(veh.position, steps, tuple(drops))


def pickup_wait(vehicle: Vehicle, request: Request, graph: ZoneGraph) -> int:
    c = commitment(vehicle, graph)
    return request.wait + c.free_in + int(graph.travel_time[c.end_node, request.origin])


def can_serve_within_deadline(vehicle: Vehicle, request: Request, graph: ZoneGraph, max_wait: int) -> bool:
    return pickup_wait(vehicle, request, graph) <= max_wait


def deterministic_service_profit(vehicle: Vehicle, request: Request, graph: ZoneGraph,
                                 prices: PricingModel, max_wait: int):
    """(profit, pickup_wait) of serving ``request`` after the vehicle's current jobs."""
    c = commitment(vehicle, graph)
    wait = request.wait + c.free_in + int(graph.travel_time[c.end_node, request.origin])
    revenue = prices.revenue_per_km * request.trip_distance if wait <= max_wait else 0.0
    km = graph.route_distance[c.end_node, request.origin] + graph.route_distance[request.origin, request.destination]
    return revenue - prices.cost_per_km * float(km), wait


def requests_from_pairs(graph: ZoneGraph, pairs, t: int, rid_start: int = 0) -> tuple:
    return tuple(make_request(graph, rid_start + k, o, d, t) for k, (o, d) in enumerate(pairs))


@dataclass
class EpisodeResult:
    step_profits: list
    residual: float
    offered: int
    served: int
    actions: list = field(default_factory=list)

    @property
    def profit(self) -> float:
        """Closed episode profit: step rewards plus the run-out of open trips."""
        return float(sum(self.step_profits)) + self.residual

    @property
    def served_share(self) -> float:
        return self.served / self.offered if self.offered else 0.0


def run_episode(policy, steps, graph: ZoneGraph, prices: PricingModel, config: EpisodeConfig,
                fleet: Sequence[Vehicle], keep_actions: bool = False) -> EpisodeResult:
    """Roll out ``policy(state) -> action`` over per-step OD pair lists ``steps``."""
    horizon = config.horizon
    rid = 0
    batches = []
    for t in range(horizon):
        pairs = steps[t] if t < len(steps) else ()
        batches.append(requests_from_pairs(graph, pairs, t, rid))
        rid += len(pairs)
    state = initial_state(fleet, batches[0])
    profits, actions, served = [], [], 0
    for t in range(horizon):
        action = list(policy(state))
        incoming = batches[t + 1] if t + 1 < horizon else ()
        reward, state, outcome = step(state, action, incoming, graph, prices, config)
        profits.append(reward)
        served += sum(1 for e in outcome.events if e[0] == "pickup" and e[3] <= config.max_wait)
        if keep_actions:
            actions.append(action)
    residual_state = state
    residual = run_out(residual_state, graph, prices, config.max_wait)
    served += _late_pickups(residual_state, graph, config.max_wait)
    return EpisodeResult(profits, residual, rid, served, actions)


def _late_pickups(state: SystemState, graph: ZoneGraph, max_wait: int) -> int:
    """Pickups within the deadline that happen during the run-out."""
    count = 0
    post = replace(state, requests=())
    while any(v.r1 is not None for v in post.fleet):
        for veh in post.fleet:
            r1 = veh.r1
            if r1 is not None and veh.tau == 0 and r1.wait is not None and veh.position == r1.origin:
                count += r1.wait <= max_wait
        post = advance_dynamics(post, (), graph)
    return count
