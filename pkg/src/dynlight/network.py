"""Road network model: lanes, roads, movements, phases and intersections.

Networks are immutable after construction. They come from :func:`build_grid`
(synthetic Manhattan grids) or :func:`load_roadnet` (the JSON roadnet format
documented in ``docs/formats.md``).
"""

from __future__ import annotations

import json
import math
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from .errors import FormatError, InvalidArgument, ValidationError

SEGMENT_LENGTH = 100.0
DEFAULT_SPEED = 11.0
DIRECTIONS = ("left", "straight", "right")
DIRECTION_RANK = {d: i for i, d in enumerate(DIRECTIONS)}
PHASE_LETTERS = "ABCDEFGH"
FORMAT_TAG = "dynlight-roadnet/1"


@dataclass(frozen=True)
class Lane:
    id: str
    road: str
    index: int
    length: float
    free_flow_speed: float = DEFAULT_SPEED
    # "incoming" when the lane feeds an intersection, "outgoing" when it leaves the network
    kind: str = "incoming"

    @property
    def segment_count(self) -> int:
        return math.ceil(self.length / SEGMENT_LENGTH)


@dataclass(frozen=True)
class Road:
    id: str
    start: str | None  # None: network boundary
    end: str | None
    length: float
    lanes: tuple[str, ...]


@dataclass(frozen=True)
class Movement:
    id: str
    intersection: str
    in_lane: str
    out_lanes: tuple[str, ...]
    direction: str


@dataclass(frozen=True)
class Phase:
    id: str
    movements: tuple[Movement, ...]

    @property
    def movement_ids(self) -> tuple[str, ...]:
        return tuple(m.id for m in self.movements)


@dataclass(frozen=True)
class Intersection:
    id: str
    incoming_lanes: tuple[str, ...]
    outgoing_lanes: tuple[str, ...]
    movements: tuple[Movement, ...]
    phases: tuple[Phase, ...]
    point: tuple[float, float] | None = None

    @property
    def phase_ids(self) -> tuple[str, ...]:
        return tuple(p.id for p in self.phases)

    def phase(self, phase_id: str) -> Phase:
        for p in self.phases:
            if p.id == phase_id:
                return p
        raise InvalidArgument(f"phase {phase_id!r} is not defined at intersection {self.id}")

    def phase_index(self, phase_id: str) -> int:
        return self.phase_ids.index(self.phase(phase_id).id)

    @property
    def controlled_movements(self) -> tuple[Movement, ...]:
        return tuple(m for m in self.movements if m.direction != "right")


class Network:
    """Directed road graph with per-intersection phase tables.

    Construction validates every structural invariant and raises
    :class:`ValidationError` naming the offending entity.
    """

    def __init__(self, intersections, roads, lanes, movements, phases):
        self.lanes: dict[str, Lane] = {}
        self.roads: dict[str, Road] = {}
        self.movements: dict[str, Movement] = {}
        self.intersections: dict[str, Intersection] = {}

        for road in roads:
            if road.id in self.roads:
                raise ValidationError(f"duplicate road id {road.id!r}", road.id)
            if not road.length > 0:
                raise ValidationError(f"road {road.id} has non-positive length", road.id)
            self.roads[road.id] = road
        owner: dict[str, str] = {}
        for road in self.roads.values():
            for lane_id in road.lanes:
                if lane_id in owner:
                    raise ValidationError(f"lane {lane_id} belongs to roads {owner[lane_id]} and {road.id}", lane_id)
                owner[lane_id] = road.id
        for lane in lanes:
            if lane.id in self.lanes:
                raise ValidationError(f"duplicate lane id {lane.id!r}", lane.id)
            if not lane.length > 0:
                raise ValidationError(f"lane {lane.id} has non-positive length", lane.id)
            if not lane.free_flow_speed > 0:
                raise ValidationError(f"lane {lane.id} has non-positive speed", lane.id)
            if lane.road not in self.roads or owner.get(lane.id) != lane.road:
                raise ValidationError(f"lane {lane.id} is not listed by its road {lane.road!r}", lane.id)
            self.lanes[lane.id] = lane
        for lane_id in owner:
            if lane_id not in self.lanes:
                raise ValidationError(f"road {owner[lane_id]} lists unknown lane {lane_id}", lane_id)

        inter_records = list(intersections)
        inter_ids = [rec[0] for rec in inter_records]
        if len(set(inter_ids)) != len(inter_ids):
            raise ValidationError("duplicate intersection id", None)
        for road in self.roads.values():
            for end in (road.start, road.end):
                if end is not None and end not in inter_ids:
                    raise ValidationError(f"road {road.id} references unknown intersection {end!r}", road.id)

        incoming: dict[str, list[str]] = {i: [] for i in inter_ids}
        outgoing: dict[str, list[str]] = {i: [] for i in inter_ids}
        for road in self.roads.values():
            lanes_sorted = sorted(road.lanes, key=lambda lid: self.lanes[lid].index)
            if road.end is not None:
                incoming[road.end].extend(lanes_sorted)
            if road.start is not None:
                outgoing[road.start].extend(lanes_sorted)

        by_inter: dict[str, list[Movement]] = {i: [] for i in inter_ids}
        for mov in movements:
            if mov.id in self.movements:
                raise ValidationError(f"duplicate movement id {mov.id!r}", mov.id)
            if mov.intersection not in by_inter:
                raise ValidationError(f"movement {mov.id} references unknown intersection", mov.id)
            if mov.direction not in DIRECTION_RANK:
                raise ValidationError(f"movement {mov.id} has unknown direction {mov.direction!r}", mov.id)
            if mov.in_lane not in incoming[mov.intersection]:
                raise ValidationError(
                    f"movement {mov.id}: in_lane {mov.in_lane} is not an incoming lane of {mov.intersection}", mov.id)
            if not mov.out_lanes:
                raise ValidationError(f"movement {mov.id} has no out_lanes", mov.id)
            for out in mov.out_lanes:
                if out not in outgoing[mov.intersection]:
                    raise ValidationError(
                        f"movement {mov.id}: out_lane {out} is not an outgoing lane of {mov.intersection}", mov.id)
            self.movements[mov.id] = mov
            by_inter[mov.intersection].append(mov)

        phase_tables: dict[str, list[Phase]] = {i: [] for i in inter_ids}
        for inter_id, phase_id, movement_ids in phases:
            if inter_id not in phase_tables:
                raise ValidationError(f"phase {phase_id} references unknown intersection {inter_id!r}", phase_id)
            movs = []
            for mid in movement_ids:
                mov = self.movements.get(mid)
                if mov is None or mov.intersection != inter_id:
                    raise ValidationError(f"phase {inter_id}/{phase_id} references foreign movement {mid!r}", phase_id)
                if mov.direction == "right":
                    raise ValidationError(f"phase {inter_id}/{phase_id} contains right-turn movement {mid}", phase_id)
                movs.append(mov)
            if not movs:
                raise ValidationError(f"phase {inter_id}/{phase_id} has no movements", phase_id)
            if any(p.id == phase_id for p in phase_tables[inter_id]):
                raise ValidationError(f"duplicate phase {phase_id} at {inter_id}", phase_id)
            phase_tables[inter_id].append(Phase(phase_id, tuple(movs)))

        for inter_id, point in inter_records:
            inter = Intersection(
                id=inter_id,
                incoming_lanes=tuple(incoming[inter_id]),
                outgoing_lanes=tuple(outgoing[inter_id]),
                movements=tuple(by_inter[inter_id]),
                phases=tuple(phase_tables[inter_id]),
                point=point,
            )
            if not inter.phases:
                raise ValidationError(f"intersection {inter_id} has no phases", inter_id)
            covered = {m.id for p in inter.phases for m in p.movements}
            for mov in inter.controlled_movements:
                if mov.id not in covered:
                    raise ValidationError(f"movement {mov.id} at {inter_id} is in no phase", mov.id)
            self.intersections[inter_id] = inter

        self._derive()
        self._check_graph()

    def _derive(self):
        self.lane_movements: dict[str, tuple[Movement, ...]] = {}
        for mov in self.movements.values():
            self.lane_movements[mov.in_lane] = self.lane_movements.get(mov.in_lane, ()) + (mov,)
        self.transition: dict[tuple[str, str], Movement] = {}
        for mov in self.movements.values():
            for out in mov.out_lanes:
                self.transition.setdefault((mov.in_lane, out), mov)
        self.entry_lanes = tuple(l for l in self.lanes if self.roads[self.lanes[l].road].start is None)
        self.exit_lanes = tuple(l for l in self.lanes if self.roads[self.lanes[l].road].end is None)
        self.entry_roads = tuple(r for r in self.roads.values() if r.start is None)
        self.exit_roads = tuple(r for r in self.roads.values() if r.end is None)

    def _check_graph(self):
        for lane in self.lanes.values():
            if self.roads[lane.road].end is not None and lane.id not in self.lane_movements:
                raise ValidationError(f"lane {lane.id} feeds an intersection but has no movement", lane.id)
        if not self.intersections:
            raise ValidationError("network has no intersections")
        # weak connectivity over intersections and boundary roads
        adj: dict[str, set[str]] = {}
        for road in self.roads.values():
            a = road.start or f"<boundary:{road.id}>"
            b = road.end or f"<boundary:{road.id}>"
            adj.setdefault(a, set()).add(b)
            adj.setdefault(b, set()).add(a)
        for i in self.intersections:
            adj.setdefault(i, set())
        start = next(iter(self.intersections))
        seen = {start}
        todo = deque([start])
        while todo:
            node = todo.popleft()
            for nxt in adj[node]:
                if nxt not in seen:
                    seen.add(nxt)
                    todo.append(nxt)
        if len(seen) != len(adj):
            missing = sorted(set(adj) - seen)[0]
            raise ValidationError(f"network is not connected ({missing} unreachable)", missing)

    def successors(self, lane_id: str) -> tuple[str, ...]:
        out: list[str] = []
        for mov in self.lane_movements.get(lane_id, ()):
            out.extend(mov.out_lanes)
        return tuple(out)

    def is_valid_route(self, route) -> bool:
        if not route or route[0] not in self.entry_lanes or route[-1] not in self.exit_lanes:
            return False
        return all((a, b) in self.transition for a, b in zip(route, route[1:]))

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_TAG,
            "intersections": [
                {"id": i.id, **({"point": list(i.point)} if i.point is not None else {})}
                for i in self.intersections.values()
            ],
            "roads": [
                {"id": r.id, "from": r.start, "to": r.end, "length": r.length, "lanes": list(r.lanes)}
                for r in self.roads.values()
            ],
            "lanes": [
                {"id": l.id, "road": l.road, "index": l.index, "length": l.length, "speed": l.free_flow_speed}
                for l in self.lanes.values()
            ],
            "movements": [
                {"id": m.id, "intersection": m.intersection, "in_lane": m.in_lane,
                 "out_lanes": list(m.out_lanes), "direction": m.direction}
                for m in self.movements.values()
            ],
            "phases": [
                {"intersection": i.id, "id": p.id, "movements": list(p.movement_ids)}
                for i in self.intersections.values() for p in i.phases
            ],
        }

    def __eq__(self, other):
        if not isinstance(other, Network):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None

    def __repr__(self):
        return (f"Network({len(self.intersections)} intersections, {len(self.roads)} roads, "
                f"{len(self.lanes)} lanes)")


def phase_lanes(intersection: Intersection, phase: str | Phase) -> tuple[str, ...]:
    """Incoming lanes served by ``phase``, in canonical order.

    Canonical order sorts by movement direction (left, straight, right) and then by
    the lane's position in the intersection's incoming lane list.
    """
    phase_id = phase.id if isinstance(phase, Phase) else phase
    chosen = intersection.phase(phase_id)
    position = {lid: k for k, lid in enumerate(intersection.incoming_lanes)}
    rank = {}
    for mov in chosen.movements:
        key = (DIRECTION_RANK[mov.direction], position[mov.in_lane])
        rank[mov.in_lane] = min(rank.get(mov.in_lane, key), key)
    return tuple(sorted(rank, key=rank.get))


# grid construction -----------------------------------------------------------

# headings: 0=east, 1=north, 2=west, 3=south
_STEP = {0: (1, 0), 1: (0, 1), 2: (-1, 0), 3: (0, -1)}
_TURN = {"left": 1, "straight": 0, "right": 3}
# incoming approach order N, E, S, W expressed as the heading of the arriving traffic
_APPROACH_HEADINGS = (3, 2, 1, 0)
# phase tables as (heading, direction) pairs
_PHASES_4 = (
    ((0, "straight"), (2, "straight")),
    ((1, "straight"), (3, "straight")),
    ((0, "left"), (2, "left")),
    ((1, "left"), (3, "left")),
)
_PHASES_8 = _PHASES_4 + (
    ((0, "straight"), (0, "left")),
    ((2, "straight"), (2, "left")),
    ((1, "straight"), (1, "left")),
    ((3, "straight"), (3, "left")),
)


def _road_id(x, y, heading):
    return f"road_{x}_{y}_{heading}"


def build_grid(rows: int, cols: int, ew_length: float, ns_length: float, phase_mode: int = 4,
               speed: float = DEFAULT_SPEED) -> Network:
    """Build a ``rows`` x ``cols`` grid of four-way intersections.

    Every approach has three lanes (left, straight, right). East-west roads are
    ``ew_length`` meters long and north-south roads ``ns_length``; boundary roads
    connect each edge intersection to the outside of the network.
    """
    if rows < 1 or cols < 1:
        raise InvalidArgument(f"grid dimensions must be >= 1, got {rows}x{cols}")
    if not (ew_length > 0 and ns_length > 0):
        raise InvalidArgument("road lengths must be positive")
    if phase_mode not in (4, 8):
        raise InvalidArgument(f"phase_mode must be 4 or 8, got {phase_mode}")

    def is_real(x, y):
        return 1 <= x <= cols and 1 <= y <= rows

    def inter_id(x, y):
        return f"intersection_{x}_{y}" if is_real(x, y) else None

    road_specs: dict[str, tuple] = {}

    def add_road(x, y, heading):
        dx, dy = _STEP[heading]
        rid = _road_id(x, y, heading)
        if rid not in road_specs:
            length = ew_length if heading in (0, 2) else ns_length
            road_specs[rid] = (rid, inter_id(x, y), inter_id(x + dx, y + dy), length)
        return rid

    ordered_roads: list[str] = []
    for y in range(1, rows + 1):
        for x in range(1, cols + 1):
            for heading in _APPROACH_HEADINGS:
                dx, dy = _STEP[heading]
                rid = add_road(x - dx, y - dy, heading)
                ordered_roads.append(rid)
    for y in range(1, rows + 1):
        for x in range(1, cols + 1):
            for heading in range(4):
                dx, dy = _STEP[heading]
                if not is_real(x + dx, y + dy):
                    ordered_roads.append(add_road(x, y, heading))

    roads, lanes = [], []
    for rid in ordered_roads:
        _, start, end, length = road_specs[rid]
        lane_ids = tuple(f"{rid}_{k}" for k in range(3))
        roads.append(Road(rid, start, end, float(length), lane_ids))
        kind = "incoming" if end is not None else "outgoing"
        lanes.extend(Lane(lid, rid, k, float(length), float(speed), kind) for k, lid in enumerate(lane_ids))

    movements, phases, intersections = [], [], []
    for y in range(1, rows + 1):
        for x in range(1, cols + 1):
            iid = inter_id(x, y)
            intersections.append((iid, (float((x - 1) * ew_length), float((y - 1) * ns_length))))
            table = {}
            for heading in _APPROACH_HEADINGS:
                dx, dy = _STEP[heading]
                in_road = _road_id(x - dx, y - dy, heading)
                for k, direction in enumerate(DIRECTIONS):
                    out_heading = (heading + _TURN[direction]) % 4
                    out_road = _road_id(x, y, out_heading)
                    mid = f"{iid}_{in_road}_{direction}"
                    movements.append(Movement(mid, iid, f"{in_road}_{k}",
                                              tuple(f"{out_road}_{j}" for j in range(3)), direction))
                    table[(heading, direction)] = mid
            spec = _PHASES_4 if phase_mode == 4 else _PHASES_8
            for letter, pair in zip(PHASE_LETTERS, spec):
                phases.append((iid, letter, tuple(table[key] for key in pair)))
    return Network(intersections, roads, lanes, movements, phases)


# roadnet file I/O --------------------------------------------------------------

_KNOWN = {
    "top": {"format", "intersections", "roads", "lanes", "movements", "phases"},
    "intersections": {"id", "point"},
    "roads": {"id", "from", "to", "length", "lanes"},
    "lanes": {"id", "road", "index", "length", "speed"},
    "movements": {"id", "intersection", "in_lane", "out_lanes", "direction"},
    "phases": {"intersection", "id", "movements"},
}


def _require(record, key, where, kind=None):
    if key not in record:
        raise FormatError(f"missing field {key!r}", where)
    value = record[key]
    if kind is not None and not isinstance(value, kind):
        raise FormatError(f"field {key!r} has wrong type {type(value).__name__}", where)
    return value


def _warn_unknown(record, section, where):
    extra = sorted(set(record) - _KNOWN[section])
    if extra:
        warnings.warn(f"ignoring unknown field(s) {extra} at {where}", UserWarning, stacklevel=4)


def network_from_dict(data: dict) -> Network:
    if not isinstance(data, dict):
        raise FormatError("roadnet root must be an object", "$")
    _warn_unknown(data, "top", "$")
    for section in ("intersections", "roads", "lanes", "movements", "phases"):
        if not isinstance(data.get(section), list):
            raise FormatError(f"missing or non-list section {section!r}", "$")

    def records(section):
        for k, rec in enumerate(data[section]):
            where = f"{section}[{k}]"
            if not isinstance(rec, dict):
                raise FormatError("record must be an object", where)
            _warn_unknown(rec, section, where)
            yield rec, where

    num = (int, float)
    inters = []
    for rec, where in records("intersections"):
        point = rec.get("point")
        inters.append((str(_require(rec, "id", where)), tuple(map(float, point)) if point is not None else None))
    roads = [
        Road(str(_require(rec, "id", where)), rec.get("from"), rec.get("to"),
             float(_require(rec, "length", where, num)), tuple(map(str, _require(rec, "lanes", where, list))))
        for rec, where in records("roads")
    ]
    road_by_id = {r.id: r for r in roads}
    lanes = []
    for rec, where in records("lanes"):
        road_id = str(_require(rec, "road", where))
        road = road_by_id.get(road_id)
        length = float(rec.get("length", road.length if road else 0.0))
        kind = "outgoing" if road is not None and road.end is None else "incoming"
        lanes.append(Lane(str(_require(rec, "id", where)), road_id, int(_require(rec, "index", where, int)),
                          length, float(rec.get("speed", DEFAULT_SPEED)), kind))
    movements = [
        Movement(str(_require(rec, "id", where)), str(_require(rec, "intersection", where)),
                 str(_require(rec, "in_lane", where)), tuple(map(str, _require(rec, "out_lanes", where, list))),
                 str(_require(rec, "direction", where)))
        for rec, where in records("movements")
    ]
    phases = [
        (str(_require(rec, "intersection", where)), str(_require(rec, "id", where)),
         tuple(map(str, _require(rec, "movements", where, list))))
        for rec, where in records("phases")
    ]
    return Network(inters, roads, lanes, movements, phases)


def load_roadnet(path) -> Network:
    """Read and validate a roadnet JSON file."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"cannot parse roadnet {path}: {exc.msg}", f"line {exc.lineno}, column {exc.colno}") from exc
    return network_from_dict(data)


def save_roadnet(network: Network, path) -> None:
    Path(path).write_text(json.dumps(network.to_dict(), indent=1) + "\n", encoding="utf-8")
