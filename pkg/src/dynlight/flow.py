"""Vehicle demand: each vehicle is an entry time plus a fixed lane route."""

from __future__ import annotations

import heapq
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgument, ValidationError
from .network import Network

DEFAULT_TURN_RATIOS = {"left": 0.2, "straight": 0.6, "right": 0.2}
FORMAT_TAG = "dynlight-flow/1"


@dataclass(frozen=True)
class VehicleSpec:
    id: str
    enter_time: int
    route: tuple[str, ...]


@dataclass(frozen=True)
class FlowSet:
    vehicles: tuple[VehicleSpec, ...]
    source: str = ""
    rate: float | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        times = [v.enter_time for v in self.vehicles]
        if times != sorted(times):
            raise ValidationError("vehicles must be sorted by enter_time")
        ids = [v.id for v in self.vehicles]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate vehicle id in flow")

    def __len__(self):
        return len(self.vehicles)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_TAG,
            "meta": {"source": self.source, "rate": self.rate, **self.meta},
            "vehicles": [{"id": v.id, "enter_time": v.enter_time, "route": list(v.route)} for v in self.vehicles],
        }


def _distances_to(network: Network, exit_road) -> dict[str, float]:
    """Meters from the end of each lane to the end of ``exit_road`` along movements."""
    dist = {lid: 0.0 for lid in exit_road.lanes}
    preds: dict[str, list[str]] = {}
    for (a, b) in network.transition:
        preds.setdefault(b, []).append(a)
    heap = [(0.0, lid) for lid in exit_road.lanes]
    heapq.heapify(heap)
    while heap:
        d, lane = heapq.heappop(heap)
        if d > dist.get(lane, math.inf):
            continue
        step = d + network.lanes[lane].length
        for prev in preds.get(lane, ()):
            if step < dist.get(prev, math.inf) - 1e-9:
                dist[prev] = step
                heapq.heappush(heap, (step, prev))
    return dist


class RoutePlanner:
    """Shortest lane paths to an exit road; turn ratios break ties between equal-length paths."""

    def __init__(self, network: Network, turn_ratios=None):
        self.network = network
        self.turn_ratios = dict(turn_ratios or DEFAULT_TURN_RATIOS)
        self._dist = {road.id: _distances_to(network, road) for road in network.exit_roads}

    def exits_for(self, entry_road) -> list:
        """Exit roads reachable from ``entry_road`` without revisiting an intersection."""
        out = []
        for road in self.network.exit_roads:
            if not any(l in self._dist[road.id] for l in entry_road.lanes):
                continue
            probe = self.route(entry_road, road, rng=None)
            if probe is not None:
                out.append(road)
        return out

    def route(self, entry_road, exit_road, rng):
        """Lane route from ``entry_road`` to ``exit_road``; None if the shortest path loops.

        With ``rng=None`` ties resolve to the highest-weight turn (used for probing).
        """
        net, dist = self.network, self._dist[exit_road.id]
        allowed = [l for l in entry_road.lanes if l in dist]
        route, visited = [], set()
        while True:
            best = min(dist[l] for l in allowed)
            cands = [l for l in allowed if dist[l] <= best + 1e-6]
            road = net.roads[net.lanes[cands[0]].road]
            if road.id == exit_road.id:
                k = 0 if rng is None else int(rng.integers(len(cands)))
                route.append(cands[k])
                return tuple(route)
            if road.end in visited:
                return None
            visited.add(road.end)
            options = []
            for lane in cands:
                for mov in net.lane_movements.get(lane, ()):
                    nxt = [o for o in mov.out_lanes
                           if o in dist and abs(net.lanes[o].length + dist[o] - dist[lane]) < 1e-6]
                    if nxt:
                        options.append((lane, mov, nxt))
            weights = np.array([self.turn_ratios.get(m.direction, 0.0) for _, m, _ in options], dtype=float)
            if weights.sum() <= 0:
                weights = np.ones(len(options))
            if rng is None:
                k = int(np.argmax(weights))
            else:
                k = int(rng.choice(len(options), p=weights / weights.sum()))
            lane, _, allowed = options[k]
            route.append(lane)


def gen_poisson_flow(network: Network, rate: float, horizon: int, seed: int, *, turn_ratios=None,
                     entry_weights=None, source="poisson") -> FlowSet:
    """Homogeneous Poisson demand over the network boundary.

    Arrivals come at aggregate ``rate`` vehicles/second and are assigned to entry
    roads uniformly (or by ``entry_weights``, a road id -> weight map). Each
    vehicle heads for a uniformly chosen reachable exit along a shortest path;
    where several shortest paths exist the turn at each intersection is drawn
    with ``turn_ratios`` (default 20% left, 60% straight, 20% right).
    """
    if not rate > 0:
        raise InvalidArgument(f"rate must be positive, got {rate}")
    if horizon < 0:
        raise InvalidArgument(f"horizon must be non-negative, got {horizon}")
    if not network.entry_roads or not network.exit_roads:
        raise InvalidArgument("network has no boundary entry/exit roads")
    planner = RoutePlanner(network, turn_ratios)
    entries = list(network.entry_roads)
    if entry_weights is None:
        p_entry = np.full(len(entries), 1.0 / len(entries))
    else:
        unknown = set(entry_weights) - {r.id for r in entries}
        if unknown:
            raise InvalidArgument(f"entry_weights names non-entry roads {sorted(unknown)}")
        w = np.array([float(entry_weights.get(r.id, 0.0)) for r in entries])
        if w.sum() <= 0:
            raise InvalidArgument("entry_weights must have positive mass")
        p_entry = w / w.sum()
    exits = {}
    for road, p in zip(entries, p_entry):
        if p > 0:
            exits[road.id] = planner.exits_for(road)
            if not exits[road.id]:
                raise InvalidArgument(f"no exit reachable from entry road {road.id}")

    rng = np.random.default_rng(seed)
    vehicles = []
    t = 0.0
    while True:
        t += rng.exponential(1.0 / rate)
        if t >= horizon:
            break
        entry = entries[rng.choice(len(entries), p=p_entry)]
        options = exits[entry.id]
        target = options[int(rng.integers(len(options)))]
        route = planner.route(entry, target, rng) or planner.route(entry, target, None)
        vehicles.append(VehicleSpec(f"flow_{len(vehicles)}", int(t), route))
    meta = {"horizon": horizon, "seed": seed, "turn_ratios": planner.turn_ratios}
    return FlowSet(tuple(vehicles), source=source, rate=float(rate), meta=meta)


def flow_from_dict(data, network: Network | None = None) -> FlowSet:
    if not isinstance(data, dict) or not isinstance(data.get("vehicles"), list):
        raise FormatError("flow root must be an object with a 'vehicles' list", "$")
    meta = dict(data.get("meta") or {})
    vehicles = []
    for k, rec in enumerate(data["vehicles"]):
        where = f"vehicles[{k}]"
        try:
            vid, enter, route = str(rec["id"]), rec["enter_time"], rec["route"]
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed vehicle record: {exc}", where) from exc
        if not isinstance(enter, int) or enter < 0:
            raise FormatError("enter_time must be a non-negative integer", where)
        if not isinstance(route, list) or not route:
            raise FormatError("route must be a non-empty list of lane ids", where)
        vehicles.append(VehicleSpec(vid, enter, tuple(map(str, route))))
    if network is not None:
        for v in vehicles:
            validate_route(network, v)
    vehicles.sort(key=lambda v: v.enter_time)
    source = meta.pop("source", "") or ""
    rate = meta.pop("rate", None)
    return FlowSet(tuple(vehicles), source=source, rate=rate, meta=meta)


def validate_route(network: Network, vehicle: VehicleSpec) -> None:
    route = vehicle.route
    for lane_id in route:
        if lane_id not in network.lanes:
            raise ValidationError(f"vehicle {vehicle.id}: unknown lane {lane_id}", vehicle.id)
    if route[0] not in network.entry_lanes:
        raise ValidationError(f"vehicle {vehicle.id}: route starts on non-entry lane {route[0]}", vehicle.id)
    if route[-1] not in network.exit_lanes:
        raise ValidationError(f"vehicle {vehicle.id}: route ends on non-exit lane {route[-1]}", vehicle.id)
    for a, b in zip(route, route[1:]):
        if (a, b) not in network.transition:
            raise ValidationError(f"vehicle {vehicle.id}: no movement from {a} to {b}", vehicle.id)


def load_flow(path, network: Network) -> FlowSet:
    """Read a flow file and validate every route against ``network``."""
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        warnings.warn(f"flow file {path} is empty", UserWarning, stacklevel=2)
        return FlowSet((), source=str(Path(path).name))
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"cannot parse flow {path}: {exc.msg}", f"line {exc.lineno}, column {exc.colno}") from exc
    return flow_from_dict(data, network)


def save_flow(flow: FlowSet, path) -> None:
    # one vehicle per line keeps large files diffable
    d = flow.to_dict()
    lines = ["{", f' "format": {json.dumps(d["format"])},', f' "meta": {json.dumps(d["meta"], sort_keys=True)},',
             ' "vehicles": [']
    recs = [json.dumps(v) for v in d["vehicles"]]
    lines.extend("  " + r + ("," if k < len(recs) - 1 else "") for k, r in enumerate(recs))
    lines.append(" ]")
    lines.append("}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
