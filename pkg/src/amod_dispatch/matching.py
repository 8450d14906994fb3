"""Maximum-weight bipartite matching between requests and vehicles.

Only strictly positive scores form edges; every node may stay unmatched.
The solver is a shortest-augmenting-path Hungarian method on the negated
weight matrix (non-edges weigh zero, which is the same as leaving a node
unmatched), vectorised over columns with numpy.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BRUTE_FORCE_LIMIT = 8


@dataclass(frozen=True)
class ScoredBipartiteGraph:
    n_requests: int
    n_vehicles: int
    edges: dict = field(default_factory=dict)  # (i, j) -> weight > 0

    def __post_init__(self):
        for (i, j), w in self.edges.items():
            if not (0 <= i < self.n_requests and 0 <= j < self.n_vehicles):
                raise ValueError(f"edge ({i}, {j}) outside the {self.n_requests}x{self.n_vehicles} graph")
            if not (w > 0 and math.isfinite(w)):
                raise ValueError(f"edge ({i}, {j}) needs a finite positive weight, got {w}")

    @classmethod
    def from_scores(cls, scores) -> "ScoredBipartiteGraph":
        """Edges are the strictly positive entries of an R x K score matrix."""
        scores = np.asarray(scores, dtype=float)
        if scores.ndim != 2:
            raise ValueError("scores must be a 2-d matrix")
        rows, cols = np.nonzero(scores > 0)
        edges = {(int(i), int(j)): float(scores[i, j]) for i, j in zip(rows, cols)}
        return cls(scores.shape[0], scores.shape[1], edges)

    def dense(self) -> np.ndarray:
        w = np.zeros((self.n_requests, self.n_vehicles))
        for (i, j), s in self.edges.items():
            w[i, j] = s
        return w

    def dump(self, path) -> None:
        """Write the instance as JSON for failure triage."""
        doc = {
            "n_requests": self.n_requests,
            "n_vehicles": self.n_vehicles,
            "edges": [[i, j, w] for (i, j), w in sorted(self.edges.items())],
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path) -> "ScoredBipartiteGraph":
        doc = json.loads(Path(path).read_text())
        return cls(doc["n_requests"], doc["n_vehicles"], {(i, j): w for i, j, w in doc["edges"]})


@dataclass(frozen=True)
class Assignment:
    pairs: tuple  # sorted (request, vehicle) pairs
    value: float

    @classmethod
    def from_pairs(cls, graph: ScoredBipartiteGraph, pairs) -> "Assignment":
        pairs = tuple(sorted((int(i), int(j)) for i, j in pairs))
        return cls(pairs, math.fsum(graph.edges[p] for p in pairs))

    def vehicle_of(self, n_requests: int) -> list:
        out = [-1] * n_requests
        for i, j in self.pairs:
            out[i] = j
        return out


def _hungarian_min(cost: np.ndarray) -> np.ndarray:
    """Rows-to-columns assignment minimising total cost, rows <= cols.

    Returns the column of each row.  Among equal reduced costs the lowest
    column index is chosen, which makes the result deterministic.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # row matched to column (1-based, 0 = free)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row


def solve_matching(graph: ScoredBipartiteGraph) -> Assignment:
    """Maximum-weight matching with at most one partner per node."""
    if not graph.edges:
        return Assignment((), 0.0)
    w = graph.dense()
    # restrict to nodes that have at least one edge
    rows = np.flatnonzero(w.max(axis=1) > 0)
    cols = np.flatnonzero(w.max(axis=0) > 0)
    sub = w[np.ix_(rows, cols)]
    if sub.shape[0] <= sub.shape[1]:
        assign = _hungarian_min(-sub)
        pairs = [(rows[a], cols[b]) for a, b in enumerate(assign)]
    else:
        assign = _hungarian_min(-sub.T)
        pairs = [(rows[b], cols[a]) for a, b in enumerate(assign)]
    pairs = [(i, j) for i, j in pairs if w[i, j] > 0]
    return Assignment.from_pairs(graph, pairs)


def brute_force_matching(graph: ScoredBipartiteGraph, limit: int = BRUTE_FORCE_LIMIT) -> Assignment:
    """Exhaustive search over all partial matchings (test oracle).

    Ties in total weight go to the lexicographically smallest sorted pair list.
    """
    if graph.n_requests > limit or graph.n_vehicles > limit:
        raise ValueError(f"brute force limited to {limit} requests and vehicles")
    options = [sorted(j for (i2, j) in graph.edges if i2 == i) for i in range(graph.n_requests)]
    best_pairs: list = []
    best_value = 0.0

    def visit(i, used, pairs):
        nonlocal best_pairs, best_value
        if i == graph.n_requests:
            value = math.fsum(graph.edges[p] for p in pairs)
            ordered = sorted(pairs)
            if value > best_value or (value == best_value and ordered < best_pairs):
                best_value, best_pairs = value, ordered
            return
        visit(i + 1, used, pairs)
        for j in options[i]:
            if j not in used:
                used.add(j)
                pairs.append((i, j))
                visit(i + 1, used, pairs)
                pairs.pop()
                used.discard(j)

    visit(0, set(), [])
    return Assignment(tuple(best_pairs), best_value)
