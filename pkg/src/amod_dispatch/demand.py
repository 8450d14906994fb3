"""Trip records, hexagonal zoning, request streams and OD-distribution estimates.

Streams are stored as per-step lists of (origin, destination) zone pairs.
Distributions are per-interval probability tables over all ordered zone
pairs with origin != destination, plus the expected request count of the
interval.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .world import ZoneGraph

EARTH_RADIUS_KM = 6371.0088
SQRT3 = math.sqrt(3.0)


class DemandError(ValueError):
    pass


# --------------------------------------------------------------------------
# hexagonal grid


@dataclass(frozen=True)
class HexGrid:
    """Pointy-top hexagons in axial coordinates around a lon/lat origin.

    ``spacing_km`` is the distance between neighbouring centres.  Only cells
    listed in ``cells`` belong to the operating area.
    """

    origin_lon: float
    origin_lat: float
    spacing_km: float
    cells: tuple  # axial (q, r) per zone, zone id = position in the tuple

    def __post_init__(self):
        if not self.spacing_km > 0:
            raise ValueError("hex spacing must be positive")
        if len(set(self.cells)) != len(self.cells):
            raise ValueError("duplicate hex cells")
        object.__setattr__(self, "_index", {tuple(c): k for k, c in enumerate(self.cells)})

    @classmethod
    def hexagon(cls, radius: int, spacing_km: float = 0.917, origin_lon: float = -73.985,
                origin_lat: float = 40.758) -> "HexGrid":
        """All cells within ``radius`` rings of the centre cell."""
        cells = [(q, r) for q in range(-radius, radius + 1) for r in range(-radius, radius + 1)
                 if abs(q + r) <= radius]
        return cls(origin_lon, origin_lat, spacing_km, tuple(cells))

    @property
    def n_zones(self) -> int:
        return len(self.cells)

    def project(self, lon, lat):
        """Equirectangular projection to km around the grid origin."""
        lon, lat = np.asarray(lon, dtype=float), np.asarray(lat, dtype=float)
        k = math.pi / 180.0 * EARTH_RADIUS_KM
        x = (lon - self.origin_lon) * k * math.cos(math.radians(self.origin_lat))
        y = (lat - self.origin_lat) * k
        return x, y

    def centers_km(self) -> np.ndarray:
        axial = np.array(self.cells, dtype=float).reshape(-1, 2)
        q, r = axial[:, 0], axial[:, 1]
        return np.stack([self.spacing_km * (q + r / 2.0), self.spacing_km * SQRT3 / 2.0 * r], axis=1)

    def axial_of(self, x, y):
        """Nearest hex centre (cube rounding) for planar km coordinates."""
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        rf = y / (self.spacing_km * SQRT3 / 2.0)
        qf = x / self.spacing_km - rf / 2.0
        sf = -qf - rf
        q, r, s = np.round(qf), np.round(rf), np.round(sf)
        dq, dr, ds = np.abs(q - qf), np.abs(r - rf), np.abs(s - sf)
        fix_q = (dq > dr) & (dq > ds)
        fix_r = ~fix_q & (dr > ds)
        q = np.where(fix_q, -r - s, q)
        r = np.where(fix_r, -q - s, r)
        return q.astype(np.int64), r.astype(np.int64)

    def zone_of(self, lon: float, lat: float) -> Optional[int]:
        """Zone id of a coordinate, or None outside the operating area."""
        x, y = self.project(lon, lat)
        q, r = self.axial_of(x, y)
        return self._index.get((int(q), int(r)))

    def neighbors(self, zone: int) -> list:
        q, r = self.cells[zone]
        out = []
        for dq, dr in ((1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)):
            k = self._index.get((q + dq, r + dr))
            if k is not None:
                out.append(k)
        return sorted(out)

    def to_graph(self, time_steps: int = 1) -> ZoneGraph:
        """Zone graph over adjacent cells; every edge is one spacing long."""
        edges = [(a, b, self.spacing_km, time_steps)
                 for a in range(self.n_zones) for b in self.neighbors(a) if a < b]
        return ZoneGraph(self.centers_km(), edges)


# --------------------------------------------------------------------------
# trip records


@dataclass(frozen=True)
class EpisodeWindow:
    start: str = "08:30"
    steps: int = 60
    step_minutes: int = 1

    def bounds(self, date: str):
        begin = datetime.fromisoformat(f"{date}T{self.start}")
        return begin, begin + timedelta(minutes=self.steps * self.step_minutes)

    def step_of(self, when: datetime) -> int:
        begin, _ = self.bounds(when.date().isoformat())
        return int((when - begin).total_seconds() // (60 * self.step_minutes))


@dataclass(frozen=True)
class TripRecord:
    placement_time: datetime
    pickup_lon: float
    pickup_lat: float
    dropoff_lon: float
    dropoff_lat: float
    origin: int
    destination: int


@dataclass
class IngestReport:
    trips: dict  # date -> list of TripRecord in time order
    rows: int = 0
    malformed: int = 0
    outside_area: int = 0
    outside_window: int = 0
    same_zone: int = 0
    dropped_by_downscale: int = 0

    def summary(self) -> dict:
        return {
            "rows": self.rows, "malformed": self.malformed, "outside_area": self.outside_area,
            "outside_window": self.outside_window, "same_zone": self.same_zone,
            "dropped_by_downscale": self.dropped_by_downscale,
            "kept": {d: len(v) for d, v in sorted(self.trips.items())},
        }


COLUMNS = ("pickup_datetime", "pickup_longitude", "pickup_latitude", "dropoff_longitude", "dropoff_latitude")


def ingest_trips(path, grid: HexGrid, downscale: int = 1, window: Optional[EpisodeWindow] = None) -> IngestReport:
    """Read a trip CSV, zone it, filter it and keep every n-th trip per date."""
    if int(downscale) != downscale or downscale < 1:
        raise ValueError("downscale factor must be a positive integer")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"trip file not found: {path}")
    report = IngestReport(trips={})
    by_date: dict = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DemandError(f"trip file lacks columns {missing}")
        for seq, row in enumerate(reader):
            report.rows += 1
            try:
                when = datetime.fromisoformat(row["pickup_datetime"].strip())
                coords = [float(row[c]) for c in COLUMNS[1:]]
            except (ValueError, TypeError, AttributeError):
                report.malformed += 1
                continue
            if not all(math.isfinite(v) for v in coords):
                report.malformed += 1
                continue
            if window is not None:
                begin, end = window.bounds(when.date().isoformat())
                if not begin <= when < end:
                    report.outside_window += 1
                    continue
            o = grid.zone_of(coords[0], coords[1])
            d = grid.zone_of(coords[2], coords[3])
            if o is None or d is None:
                report.outside_area += 1
                continue
            if o == d:
                report.same_zone += 1
                continue
            rec = TripRecord(when, *coords, o, d)
            by_date.setdefault(when.date().isoformat(), []).append((when, seq, rec))
    for date, items in sorted(by_date.items()):
        items.sort(key=lambda x: (x[0], x[1]))  # time order, file order among equal times
        kept = [rec for k, (_, _, rec) in enumerate(items) if k % downscale == 0]
        report.dropped_by_downscale += len(items) - len(kept)
        report.trips[date] = kept
    if not any(report.trips.values()):
        raise DemandError(f"no usable trips in {path} ({report.malformed} malformed rows)")
    return report


# --------------------------------------------------------------------------
# request streams


@dataclass
class RequestStream:
    steps: list  # per step: list of (origin, destination)
    provenance: str = ""

    @property
    def horizon(self) -> int:
        return len(self.steps)

    def total(self) -> int:
        return sum(len(s) for s in self.steps)

    def counts(self) -> np.ndarray:
        return np.array([len(s) for s in self.steps], dtype=np.int64)

    def to_jsonl(self, path) -> None:
        lines = [json.dumps({"provenance": self.provenance, "horizon": self.horizon})]
        lines += [json.dumps([[int(o), int(d)] for o, d in s]) for s in self.steps]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "RequestStream":
        lines = Path(path).read_text().splitlines()
        head = json.loads(lines[0])
        steps = [[tuple(p) for p in json.loads(line)] for line in lines[1:] if line.strip()]
        if len(steps) != head["horizon"]:
            raise DemandError(f"stream {path} has {len(steps)} steps, header says {head['horizon']}")
        return cls(steps, head.get("provenance", ""))


def replay_stream(trips: dict, date: str, window: EpisodeWindow) -> RequestStream:
    """Bucket one date's trips into steps (floor), keeping their order."""
    if date not in trips:
        raise KeyError(f"unknown date {date!r}")
    steps: list = [[] for _ in range(window.steps)]
    begin, end = window.bounds(date)
    for rec in trips[date]:
        if begin <= rec.placement_time < end:
            steps[window.step_of(rec.placement_time)].append((rec.origin, rec.destination))
    return RequestStream(steps, f"replay:{date}")


# --------------------------------------------------------------------------
# OD distributions


def od_pairs(n_zones: int) -> list:
    return [(o, d) for o in range(n_zones) for d in range(n_zones) if o != d]


@dataclass
class ODDistribution:
    n_zones: int
    interval_steps: int
    probs: np.ndarray     # (n_intervals, M)
    expected: np.ndarray  # (n_intervals,) expected requests per interval

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        self.expected = np.asarray(self.expected, dtype=float)
        M = self.n_zones * (self.n_zones - 1)
        if self.probs.ndim != 2 or self.probs.shape[1] != M:
            raise DemandError(f"probability table must have shape (intervals, {M})")
        if self.expected.shape != (self.probs.shape[0],):
            raise DemandError("one expected count per interval required")
        if np.any(self.probs < 0) or np.any(np.abs(self.probs.sum(axis=1) - 1.0) > 1e-12):
            raise DemandError("each interval's probabilities must sum to one")
        if np.any(self.expected < 0):
            raise DemandError("expected counts must be non-negative")

    @property
    def n_intervals(self) -> int:
        return len(self.expected)

    @property
    def pairs(self) -> list:
        return od_pairs(self.n_zones)

    def interval_of(self, t: int) -> int:
        return min(t // self.interval_steps, self.n_intervals - 1)

    def rate(self, t: int) -> float:
        """Expected requests at step t."""
        return float(self.expected[self.interval_of(t)]) / self.interval_steps

    def to_json(self) -> dict:
        pairs = self.pairs
        return {
            "n_zones": self.n_zones,
            "interval_steps": self.interval_steps,
            "intervals": [
                {"expected": float(self.expected[k]),
                 "pairs": [[o, d, float(p)] for (o, d), p in zip(pairs, self.probs[k])]}
                for k in range(self.n_intervals)
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ODDistribution":
        n = doc["n_zones"]
        index = {p: k for k, p in enumerate(od_pairs(n))}
        probs = np.zeros((len(doc["intervals"]), n * (n - 1)))
        for k, block in enumerate(doc["intervals"]):
            for o, d, p in block["pairs"]:
                probs[k, index[(o, d)]] = p
        return cls(n, doc["interval_steps"], probs, [b["expected"] for b in doc["intervals"]])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "ODDistribution":
        return cls.from_json(json.loads(Path(path).read_text()))


def _normalise(rows: np.ndarray) -> np.ndarray:
    rows = rows / rows.sum(axis=1, keepdims=True)
    # push the rounding residue into the largest entry so rows sum to one
    for row in rows:
        k = int(np.argmax(row))
        row[k] += 1.0 - math.fsum(row)
    return rows


def estimate_od_distribution(streams: Sequence[RequestStream], n_zones: int, interval_steps: int = 15,
                             epsilon: float = 1.0) -> ODDistribution:
    """Laplace-smoothed interval OD tables; expected counts are per-date means."""
    if not epsilon > 0:
        raise ValueError("smoothing epsilon must be positive")
    if not streams:
        raise DemandError("at least one training date is required")
    horizon = max(s.horizon for s in streams)
    n_int = max(1, math.ceil(horizon / interval_steps))
    index = {p: k for k, p in enumerate(od_pairs(n_zones))}
    counts = np.zeros((n_int, len(index)))
    for s in streams:
        for t, step in enumerate(s.steps):
            k = min(t // interval_steps, n_int - 1)
            for o, d in step:
                counts[k, index[(o, d)]] += 1
    expected = counts.sum(axis=1) / len(streams)
    return ODDistribution(n_zones, interval_steps, _normalise(counts + epsilon), expected)


def estimate_from_counts(counts: np.ndarray, n_zones: int, interval_steps: int, expected,
                         epsilon: float = 1.0) -> ODDistribution:
    return ODDistribution(n_zones, interval_steps, _normalise(np.asarray(counts, float) + epsilon), expected)


def sample_stream(dist: ODDistribution, horizon: int, seed, mode: str = "poisson") -> RequestStream:
    """Synthetic stream: per-step counts, i.i.d. OD pairs from the active interval."""
    rng = np.random.default_rng(seed)
    pairs = dist.pairs
    counts = step_counts(dist, horizon, rng, mode)
    steps = []
    for t, n in enumerate(counts):
        if n == 0:
            steps.append([])
            continue
        draw = rng.choice(len(pairs), size=int(n), p=dist.probs[dist.interval_of(t)])
        steps.append([pairs[k] for k in draw])
    return RequestStream(steps, f"synthetic:{seed}")


def step_counts(dist: ODDistribution, horizon: int, rng, mode: str = "poisson") -> np.ndarray:
    if mode == "poisson":
        return rng.poisson([dist.rate(t) for t in range(horizon)])
    if mode != "deterministic":
        raise ValueError(f"unknown count mode {mode!r}")
    counts = np.zeros(horizon, dtype=np.int64)
    for k in range(dist.n_intervals):
        lo = k * dist.interval_steps
        hi = min(lo + dist.interval_steps, horizon)
        if lo >= hi:
            break
        n = int(round(dist.expected[k]))
        span = hi - lo
        counts[lo:hi] = n // span
        counts[lo:lo + n % span] += 1
    return counts


def sample_requests(dist: ODDistribution, n: int, rng) -> np.ndarray:
    """(n_intervals, M) counts of n requests; intervals drawn proportional to expected counts."""
    weights = dist.expected / dist.expected.sum() if dist.expected.sum() > 0 else None
    per_interval = rng.multinomial(n, weights if weights is not None else np.full(dist.n_intervals, 1 / dist.n_intervals))
    return np.stack([rng.multinomial(m, dist.probs[k]) for k, m in enumerate(per_interval)])


@dataclass(frozen=True)
class KLResult:
    per_interval: np.ndarray
    aggregate: float


def kl_divergence(p: ODDistribution, q: ODDistribution) -> KLResult:
    """KL(p || q) per interval and its expected-count weighted mean (natural log)."""
    if p.n_zones != q.n_zones or p.probs.shape != q.probs.shape:
        raise DemandError("distributions have different supports")
    if np.any(q.probs <= 0):
        raise DemandError("q must be strictly positive")
    P, Q = p.probs, q.probs
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0, P * (np.log(P) - np.log(Q)), 0.0)
    per = terms.sum(axis=1)
    w = p.expected
    agg = float(np.dot(w, per) / w.sum()) if w.sum() > 0 else float(per.mean())
    return KLResult(per, max(agg, 0.0))


def synthetic_distribution(n_zones: int, n_intervals: int, expected_per_interval, rng,
                           concentration: float = 0.5, interval_steps: int = 15) -> ODDistribution:
    """Random ground-truth distribution with Dirichlet tables."""
    M = n_zones * (n_zones - 1)
    probs = rng.dirichlet(np.full(M, concentration), size=n_intervals)
    probs = _normalise(np.maximum(probs, 1e-300))
    expected = np.broadcast_to(np.asarray(expected_per_interval, float), (n_intervals,)).copy()
    return ODDistribution(n_zones, interval_steps, probs, expected)


# --------------------------------------------------------------------------
# demand profile


@dataclass(frozen=True)
class DemandProfile:
    cumulative: np.ndarray  # mean requests placed up to and including each step

    def expected_by(self, t: int) -> float:
        if len(self.cumulative) == 0:
            return 0.0
        return float(self.cumulative[min(max(t, 0), len(self.cumulative) - 1)])

    def to_json(self) -> list:
        return [float(x) for x in self.cumulative]


def demand_profile(streams: Sequence[RequestStream]) -> DemandProfile:
    if not streams:
        raise DemandError("demand profile needs at least one date")
    horizon = max(s.horizon for s in streams)
    counts = np.zeros(horizon)
    for s in streams:
        counts[:s.horizon] += s.counts()
    return DemandProfile(np.cumsum(counts) / len(streams))
