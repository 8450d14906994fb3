import csv
import math
from datetime import datetime

import numpy as np
import pytest

from amod_dispatch import demand as dm

GRID = dm.HexGrid.hexagon(1)


def lonlat(grid, zone):
    """Coordinates of a zone centre (inverse of the grid projection)."""
    x, y = grid.centers_km()[zone]
    k = math.pi / 180.0 * dm.EARTH_RADIUS_KM
    return grid.origin_lon + x / (k * math.cos(math.radians(grid.origin_lat))), grid.origin_lat + y / k


def write_trips(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(dm.COLUMNS)
        for when, o, d in rows:
            w.writerow([when, *lonlat(GRID, o), *lonlat(GRID, d)])
    return path


def test_hex_grid_zones_and_graph():
    assert GRID.n_zones == 7
    for z in range(GRID.n_zones):
        assert GRID.zone_of(*lonlat(GRID, z)) == z
    assert GRID.zone_of(-70.0, 40.0) is None
    g = GRID.to_graph()
    centre = GRID.cells.index((0, 0))
    assert len(GRID.neighbors(centre)) == 6
    assert g.n_nodes == 7


def test_ingest_keeps_distinct_zone_trips(tmp_path):
    rows = [(f"2015-01-05T08:3{k}:00", k % 7, (k + 1) % 7) for k in range(6)]
    rep = dm.ingest_trips(write_trips(tmp_path / "t.csv", rows), GRID)
    assert len(rep.trips["2015-01-05"]) == 6


def test_ingest_filters_and_reports(tmp_path):
    path = tmp_path / "t.csv"
    write_trips(path, [("2015-01-05T08:30:00", 1, 1), ("2015-01-05T08:31:00", 1, 2)])
    with open(path, "a") as fh:
        fh.write("not-a-date,1,2,3,4\n")
        fh.write("2015-01-05T08:32:00,-70.0,40.0,-70.0,40.0\n")
    rep = dm.ingest_trips(path, GRID)
    s = rep.summary()
    assert (s["same_zone"], s["malformed"], s["outside_area"]) == (1, 1, 1)
    assert s["kept"] == {"2015-01-05": 1}


def test_ingest_empty_is_error(tmp_path):
    with pytest.raises(dm.DemandError):
        dm.ingest_trips(write_trips(tmp_path / "t.csv", [("2015-01-05T08:30:00", 2, 2)]), GRID)


def test_downscale_keeps_every_nth_rank(tmp_path):
    rows = [(f"2015-01-05T08:{30 + k // 60:02d}:{k % 60:02d}", 1, 2 + k % 5) for k in range(100)]
    rep = dm.ingest_trips(write_trips(tmp_path / "t.csv", rows), GRID, downscale=20)
    kept = [r.placement_time.second + 60 * (r.placement_time.minute - 30) for r in rep.trips["2015-01-05"]]
    assert [k + 1 for k in kept] == [1, 21, 41, 61, 81]  # 1-based ranks
    assert rep.dropped_by_downscale == 95
    with pytest.raises(ValueError):
        dm.ingest_trips(tmp_path / "t.csv", GRID, downscale=0)


def test_replay_bucketing_and_order():
    w = dm.EpisodeWindow("08:30", 5)
    rec = lambda ts, o, d: dm.TripRecord(datetime.fromisoformat(ts), 0, 0, 0, 0, o, d)
    trips = {"2015-01-05": [rec("2015-01-05T08:30:10", 1, 2), rec("2015-01-05T08:30:50", 3, 4),
                            rec("2015-01-05T08:31:30", 5, 6)]}
    s = dm.replay_stream(trips, "2015-01-05", w)
    assert s.steps[0] == [(1, 2), (3, 4)]
    assert s.steps[1] == [(5, 6)]
    assert dm.replay_stream({"2015-01-06": []}, "2015-01-06", w).steps == [[]] * 5
    with pytest.raises(KeyError):
        dm.replay_stream(trips, "2015-02-01", w)


def test_ingest_replay_round_trip(tmp_path):
    rows = [(f"2015-01-0{5 + k % 2}T08:{30 + k % 20}:15", k % 7, (k + 3) % 7) for k in range(40)]
    w = dm.EpisodeWindow("08:30", 60)
    rep = dm.ingest_trips(write_trips(tmp_path / "t.csv", rows), GRID, window=w)
    for date, recs in rep.trips.items():
        assert dm.replay_stream(rep.trips, date, w).total() == len(recs)


def test_stream_jsonl_round_trip(tmp_path):
    s = dm.RequestStream([[(0, 1)], [], [(2, 3), (3, 2)]], "x")
    s.to_jsonl(tmp_path / "s.jsonl")
    back = dm.RequestStream.from_jsonl(tmp_path / "s.jsonl")
    assert back.steps == s.steps and back.provenance == "x"


def test_estimate_closed_form():
    s = dm.RequestStream([[(0, 1), (0, 1), (0, 1), (1, 0)]])
    d = dm.estimate_od_distribution([s], 2, interval_steps=15, epsilon=1.0)
    assert np.allclose(d.probs[0], [4 / 6, 2 / 6])
    assert d.expected[0] == 4


def test_estimate_limits():
    d = dm.estimate_od_distribution([dm.RequestStream([[]])], 3, epsilon=1.0)
    assert np.allclose(d.probs, 1 / 6)
    d = dm.estimate_od_distribution([dm.RequestStream([[(0, 1)]])], 3, epsilon=1e-12)
    assert d.probs[0, d.pairs.index((0, 1))] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        dm.estimate_od_distribution([dm.RequestStream([[]])], 3, epsilon=0)
    with pytest.raises(dm.DemandError):
        dm.estimate_od_distribution([], 3)


def test_distribution_json_round_trip(tmp_path):
    d = dm.synthetic_distribution(4, 3, 10.0, np.random.default_rng(0))
    d.save(tmp_path / "d.json")
    back = dm.ODDistribution.load(tmp_path / "d.json")
    assert np.array_equal(back.probs, d.probs) and np.array_equal(back.expected, d.expected)


def test_sample_stream():
    zero = dm.ODDistribution(3, 5, np.full((1, 6), 1 / 6), [0.0])
    assert dm.sample_stream(zero, 10, 0).total() == 0
    point = np.zeros((1, 6))
    point[0, 2] = 1.0
    d = dm.ODDistribution(3, 5, point, [20.0])
    s = dm.sample_stream(d, 10, 1)
    assert s.total() > 0 and all(p == d.pairs[2] for step in s.steps for p in step)
    assert dm.sample_stream(d, 10, 7).steps == dm.sample_stream(d, 10, 7).steps


def test_deterministic_counts():
    d = dm.ODDistribution(2, 4, np.full((2, 2), 0.5), [6.0, 2.0])
    assert dm.step_counts(d, 8, None, "deterministic").tolist() == [2, 2, 1, 1, 1, 1, 0, 0]


def test_kl_examples():
    p = dm.ODDistribution(2, 1, [[0.5, 0.5]], [1.0])
    q = dm.ODDistribution(2, 1, [[0.75, 0.25]], [1.0])
    assert dm.kl_divergence(p, p).aggregate == 0.0
    assert dm.kl_divergence(p, q).aggregate == pytest.approx(0.5 * math.log(2 / 3) + 0.5 * math.log(2), abs=1e-12)
    assert dm.kl_divergence(p, q).aggregate == pytest.approx(0.14384, abs=1e-5)
    zero = dm.ODDistribution(2, 1, [[1.0, 0.0]], [1.0])
    assert dm.kl_divergence(zero, q).aggregate == pytest.approx(math.log(1 / 0.75))
    with pytest.raises(dm.DemandError):
        dm.kl_divergence(p, dm.ODDistribution(3, 1, np.full((1, 6), 1 / 6), [1.0]))


def test_demand_profile():
    s = dm.RequestStream([[(0, 1)] * 2, [], [(0, 1)] * 3])
    assert dm.demand_profile([s]).cumulative.tolist() == [2, 2, 5]
    assert dm.demand_profile([s, s]).cumulative.tolist() == [2, 2, 5]
    assert dm.demand_profile([s]).expected_by(99) == 5
    with pytest.raises(dm.DemandError):
        dm.demand_profile([])
