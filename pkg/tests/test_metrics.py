import json
import logging

import pytest
from hypothesis import given, strategies as st

from dynlight.errors import InvalidArgument, UndefinedMetric
from dynlight.flow import gen_poisson_flow
from dynlight.metrics import (EpisodeResult, TripLog, adjusted_att, classic_att, fmt, summarize,
                              transferability, write_trip_csv)
from dynlight.network import build_grid
from dynlight.policies import Controller, FixedTimeController, PhasePolicyController, make_selector
from dynlight.sim import run_episode


def log_of(trips, end):
    return TripLog({k: a for k, (a, _) in trips.items()}, {k: b for k, (_, b) in trips.items()}, end)


def test_two_vehicle_mean():
    assert adjusted_att(log_of({"a": (0, 100), "b": (50, 350)}, 400)) == 200


def test_empty_log_is_undefined():
    with pytest.raises(UndefinedMetric):
        adjusted_att(TripLog({}, {}, 0))
    with pytest.raises(UndefinedMetric):
        classic_att(log_of({"a": (0, None)}, 10))


def test_unexited_vehicles_count_until_log_end():
    log = log_of({"a": (0, 100), "b": (100, None)}, 1000)
    assert log.undrained and log.throughput == 1
    assert adjusted_att(log) == (100 + 900) / 2
    assert classic_att(log) == 100


class HoldA(Controller):
    def decide(self, sim, iid):
        return "A", 10_000


def test_gridlock_classic_below_adjusted():
    net = build_grid(1, 1, 300, 300)
    res, log = run_episode(net, gen_poisson_flow(net, 0.5, 300, 0), HoldA(), 300, return_log=True)
    assert res.undrained and res.throughput < res.n_vehicles
    assert res.end_time == 1200
    assert classic_att(log) <= adjusted_att(log)
    assert res.att_exited <= res.adjusted_att


def test_drained_denominator_is_flow_size():
    net = build_grid(2, 2, 300, 300)
    flow = gen_poisson_flow(net, 1.0, 600, 1)
    res, log = run_episode(net, flow, FixedTimeController(), 600, return_log=True)
    assert not res.undrained
    assert len(log.enter) == res.throughput == res.n_vehicles == len(flow)


@given(st.dictionaries(st.text(min_size=1, max_size=6), st.tuples(st.integers(0, 500), st.integers(0, 500)),
                       min_size=1, max_size=30),
       st.randoms(use_true_random=False))
def test_relabel_invariance(trips, rnd):
    trips = {k: (a, a + b) for k, (a, b) in trips.items()}
    names = list(trips)
    shuffled = names[:]
    rnd.shuffle(shuffled)
    relabeled = {f"x{n}": trips[o] for n, o in enumerate(shuffled)}
    assert adjusted_att(log_of(trips, 2000)) == pytest.approx(adjusted_att(log_of(relabeled, 2000)))


@pytest.mark.parametrize("train,transfer,expected", [(250, 250, 0.0), (200, 300, 0.5), (300, 285, -0.05)])
def test_transferability_examples(train, transfer, expected):
    assert transferability(train, transfer) == pytest.approx(expected)


@pytest.mark.parametrize("bad", [0, -1.0])
def test_transferability_rejects_nonpositive(bad):
    with pytest.raises(InvalidArgument):
        transferability(bad, 100)


@given(st.floats(1e-6, 1e6))
def test_identity_transfer_is_zero(t):
    assert transferability(t, t) == 0.0


def test_summarize_identical():
    row = summarize([[7.0] * 10] * 3)
    assert row.mean == 7.0 and row.sd == 0.0 and row.episodes_used == 10


def test_summarize_single_seed():
    row = summarize([1.0, 2.0, 3.0] * 4)
    assert row.sd is None and row.mean == pytest.approx(sum(([1.0, 2.0, 3.0] * 4)[-10:]) / 10)


def test_summarize_fixture(fixtures_dir):
    known = json.loads((fixtures_dir / "summary_known.json").read_text())
    row = summarize(known["seeds"])
    assert row.per_seed == pytest.approx(known["per_seed"])
    assert row.mean == pytest.approx(known["mean"])
    assert row.sd == pytest.approx(known["sd"])


def test_summarize_warns_when_short(caplog):
    with caplog.at_level(logging.WARNING, logger="dynlight.metrics"):
        row = summarize([[1.0, 3.0]])
    assert row.mean == 2.0 and row.episodes_used == 2
    assert "only 2 episodes" in caplog.text


def test_summarize_rejects_empty():
    with pytest.raises(InvalidArgument):
        summarize([])


def test_episode_result_round_trip():
    net = build_grid(1, 1, 300, 300)
    res = run_episode(net, gen_poisson_flow(net, 0.5, 300, 2), FixedTimeController(), 300)
    back = EpisodeResult.from_dict(json.loads(res.to_json()))
    assert back.to_json() == res.to_json()
    assert back.decisions["count"] == res.decisions["count"] > 0


def test_trip_csv(tmp_path):
    path = tmp_path / "trips.csv"
    write_trip_csv(log_of({"a": (0, 100), "b": (5, None)}, 200), path)
    assert path.read_text() == "vehicle_id,enter,exit\na,0,100\nb,5,\n"


def test_fmt():
    assert fmt(288.844) == "288.84" and fmt(None) == "" and fmt(float("nan")) == ""


def test_drained_throughput_equal_across_controllers():
    net = build_grid(2, 2, 300, 300)
    flow = gen_poisson_flow(net, 1.2, 600, 3)
    ctrls = [FixedTimeController()] + [PhasePolicyController(make_selector(n)) for n in ("mql", "emp", "cyclical")]
    results = [run_episode(net, flow, c, 600) for c in ctrls]
    assert all(not r.undrained for r in results)
    assert {r.throughput for r in results} == {len(flow)}
