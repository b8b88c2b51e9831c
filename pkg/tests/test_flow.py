import json
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynlight.errors import InvalidArgument, ValidationError
from dynlight.flow import FlowSet, VehicleSpec, gen_poisson_flow, load_flow, save_flow, validate_route
from dynlight.network import build_grid

JINAN = build_grid(3, 4, 400, 800, 4)
SINGLE = build_grid(1, 1, 300, 300, 4)


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000))
def test_jinan_rate_within_three_sigma(seed):
    flow = gen_poisson_flow(JINAN, 1.75, 3600, seed)
    assert 1.60 <= len(flow) / 3600 <= 1.90


def test_zero_horizon_is_empty():
    assert len(gen_poisson_flow(SINGLE, 0.5, 0, 3)) == 0


def test_same_seed_byte_identical(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    save_flow(gen_poisson_flow(JINAN, 1.2, 600, 11), a)
    save_flow(gen_poisson_flow(JINAN, 1.2, 600, 11), b)
    assert a.read_bytes() == b.read_bytes()


def test_different_seeds_differ():
    assert gen_poisson_flow(SINGLE, 1.0, 600, 1) != gen_poisson_flow(SINGLE, 1.0, 600, 2)


def test_round_trip(tmp_path):
    flow = gen_poisson_flow(JINAN, 1.2, 900, 5)
    path = tmp_path / "flow.json"
    save_flow(flow, path)
    back = load_flow(path, JINAN)
    assert back == flow
    assert back.meta == flow.meta


def test_golden_flow(fixtures_dir):
    flow = load_flow(fixtures_dir / "flow_small.json", SINGLE)
    assert flow == gen_poisson_flow(SINGLE, 0.05, 120, 7)


def test_bad_route_cites_vehicle(fixtures_dir):
    with pytest.raises(ValidationError, match="flow_1") as exc:
        load_flow(fixtures_dir / "flow_bad_route.json", SINGLE)
    assert exc.value.entity == "flow_1"


def test_empty_file_warns(fixtures_dir):
    with pytest.warns(UserWarning, match="empty"):
        flow = load_flow(fixtures_dir / "flow_empty.json", SINGLE)
    assert len(flow) == 0


def test_no_boundary_lanes():
    closed = SimpleNamespace(entry_roads=(), exit_roads=())
    with pytest.raises(InvalidArgument):
        gen_poisson_flow(closed, 1.0, 100, 0)


@pytest.mark.parametrize("rate", [0, -1.0])
def test_rate_must_be_positive(rate):
    with pytest.raises(InvalidArgument):
        gen_poisson_flow(SINGLE, rate, 100, 0)


def test_flowset_rejects_unsorted_and_duplicates():
    with pytest.raises(ValidationError):
        FlowSet((VehicleSpec("a", 5, ("x",)), VehicleSpec("b", 1, ("x",))))
    with pytest.raises(ValidationError):
        FlowSet((VehicleSpec("a", 1, ("x",)), VehicleSpec("a", 2, ("x",))))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([(1, 1), (2, 3), (3, 4)]))
def test_generated_routes_are_feasible(seed, shape):
    net = build_grid(*shape, 400, 800)
    flow = gen_poisson_flow(net, 1.0, 300, seed)
    enter_times = [v.enter_time for v in flow.vehicles]
    assert enter_times == sorted(enter_times)
    assert all(0 <= t < 300 for t in enter_times)
    for v in flow.vehicles:
        validate_route(net, v)
        # no intersection is crossed twice
        crossed = [net.roads[net.lanes[l].road].end for l in v.route[:-1]]
        assert len(crossed) == len(set(crossed))


def test_rate_converges():
    flow = gen_poisson_flow(JINAN, 1.21, 7200, 3)
    assert abs(len(flow) / 7200 - 1.21) <= 0.121


def test_single_intersection_turns_follow_uniform_exit():
    net = build_grid(1, 1, 300, 300)
    flow = gen_poisson_flow(net, 2.0, 3600, 0)
    kinds = [net.transition[(v.route[0], v.route[1])].direction for v in flow.vehicles]
    share = {k: kinds.count(k) / len(kinds) for k in ("left", "straight", "right")}
    # single intersection: the exit is uniform, so each turn gets about a third
    assert all(abs(s - 1 / 3) < 0.05 for s in share.values())


def test_entry_weights_shift_demand():
    w = {r.id: (3.0 if r.id == "road_0_1_0" else 1.0) for r in SINGLE.entry_roads}
    flow = gen_poisson_flow(SINGLE, 2.0, 3600, 1, entry_weights=w)
    share = np.mean([v.route[0].startswith("road_0_1_0") for v in flow.vehicles])
    assert abs(share - 0.5) < 0.03
    with pytest.raises(InvalidArgument):
        gen_poisson_flow(SINGLE, 2.0, 10, 1, entry_weights={"nope": 1.0})


def test_flow_file_is_one_vehicle_per_line(tmp_path):
    flow = gen_poisson_flow(SINGLE, 0.5, 60, 2)
    path = tmp_path / "f.json"
    save_flow(flow, path)
    lines = path.read_text().splitlines()
    assert sum('"enter_time"' in l for l in lines) == len(flow)
    assert json.loads(path.read_text())["format"] == "dynlight-flow/1"
