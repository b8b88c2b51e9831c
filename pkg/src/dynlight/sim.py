"""Deterministic 1-second point-queue traffic engine.

Vehicles cross each lane at free-flow speed, then wait in a vertical queue at
the stop line and discharge through green movements at ``sat_rate`` vehicles
per second per movement. Lane occupancy is capped at ``length / vehicle_length``
vehicles, so queues spill back onto upstream movements.

Timing: a vehicle entering a lane at real time ``e`` reaches the stop line at
``e + length / speed`` and joins the queue in the step ``ceil`` of that time.
Discharged at step ``t``, it enters the next lane at
``arrival + (t - join_step) + 1``: whole seconds spent waiting are added, the
sub-second offset is carried over and crossing the intersection takes one
second. An unobstructed trip therefore lasts
``ceil(route_length / speed) + number_of_intersections``.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field, replace

from .errors import InvalidArgument, SimulationStateError
from .flow import FlowSet
from .metrics import EpisodeResult, TripLog, episode_result
from .network import SEGMENT_LENGTH, Network

N_SEGMENTS = 4


@dataclass(frozen=True)
class SimConfig:
    sat_rate: float = 1.0
    amber_s: int = 3
    vehicle_length: float = 7.0
    free_flow_speed: float | None = None  # overrides per-lane speeds when set
    duration_set: tuple[int, ...] | None = None
    trace: bool = False

    def __post_init__(self):
        if not self.sat_rate > 0:
            raise InvalidArgument(f"sat_rate must be positive, got {self.sat_rate!r}")
        if not isinstance(self.amber_s, int) or self.amber_s < 0:
            raise InvalidArgument(f"amber_s must be a non-negative integer, got {self.amber_s!r}")
        if not self.vehicle_length > 0:
            raise InvalidArgument("vehicle_length must be positive")
        if self.free_flow_speed is not None and not self.free_flow_speed > 0:
            raise InvalidArgument("free_flow_speed must be positive")


@dataclass
class SignalState:
    phase: str | None = None
    elapsed: int = 0
    committed_duration: int = 0
    in_amber: bool = False
    amber_remaining: int = 0

    @property
    def ready(self) -> bool:
        """True when the controller owes this intersection a decision."""
        if self.in_amber:
            return False
        return self.phase is None or self.elapsed >= self.committed_duration


@dataclass(frozen=True)
class LaneObservation:
    q: int
    x: int
    x_seg: tuple[int, ...]


@dataclass(frozen=True)
class IntersectionObservation:
    intersection: str
    time: int
    lanes: dict[str, LaneObservation]
    signal: SignalState

    def __getitem__(self, lane_id):
        return self.lanes[lane_id]

    def __contains__(self, lane_id):
        return lane_id in self.lanes


@dataclass(eq=False)
class VehicleState:
    vid: int
    spec_id: str
    route: tuple[int, ...]
    enter_time: int
    route_index: int = 0
    lane_entry: float = 0.0
    arrive: float = 0.0
    queued_at: int | None = None
    exit_time: int | None = None

    @property
    def lane(self) -> int:
        return self.route[self.route_index]


@dataclass(frozen=True)
class Discharge:
    """One vehicle crossing a stop line (recorded only with ``trace=True``)."""
    time: int
    intersection: str
    movement: str
    vehicle: str
    from_lane: str
    to_lane: str


class Simulator:
    def __init__(self, network: Network, flow: FlowSet, config: SimConfig | None = None):
        self.network = network
        self.flow = flow
        self.config = config or SimConfig()
        cfg = self.config

        self.lane_ids = list(network.lanes)
        self._lane_idx = {lid: k for k, lid in enumerate(self.lane_ids)}
        self.lane_length, self.lane_speed, self.lane_travel, self.lane_cap = [], [], [], []
        for lid in self.lane_ids:
            lane = network.lanes[lid]
            speed = cfg.free_flow_speed or lane.free_flow_speed
            self.lane_length.append(lane.length)
            self.lane_speed.append(speed)
            self.lane_travel.append(lane.length / speed)
            self.lane_cap.append(max(1, int(lane.length // cfg.vehicle_length)))
        n_lanes = len(self.lane_ids)
        self.lane_moving: list[dict[int, None]] = [dict() for _ in range(n_lanes)]
        self.lane_queue: list[deque[int]] = [deque() for _ in range(n_lanes)]
        self.lane_count = [0] * n_lanes
        self._lane_is_exit = [network.roads[network.lanes[l].road].end is None for l in self.lane_ids]

        self.movement_ids = list(network.movements)
        mov_idx = {mid: k for k, mid in enumerate(self.movement_ids)}
        self._transition = {
            (self._lane_idx[a], self._lane_idx[b]): mov_idx[m.id] for (a, b), m in network.transition.items()
        }
        self.inter_ids = list(network.intersections)
        self._inter_idx = {iid: k for k, iid in enumerate(self.inter_ids)}
        self._inter_in_lanes = []
        self._green: list[dict[str | None, frozenset[int]]] = []
        for iid in self.inter_ids:
            inter = network.intersections[iid]
            self._inter_in_lanes.append([self._lane_idx[l] for l in inter.incoming_lanes])
            rights = frozenset(mov_idx[m.id] for m in inter.movements if m.direction == "right")
            table = {None: rights}
            for p in inter.phases:
                table[p.id] = rights | {mov_idx[m.id] for m in p.movements}
            self._green.append(table)
        self.signals = {iid: SignalState() for iid in self.inter_ids}
        # a movement may discharge while its next free slot lies inside the current step
        self._mov_free_at = [0.0] * len(self.movement_ids)
        self._headway = 1.0 / cfg.sat_rate

        self.vehicles = [
            VehicleState(k, spec.id, tuple(self._lane_idx[l] for l in spec.route), spec.enter_time)
            for k, spec in enumerate(flow.vehicles)
        ]
        self._next_vehicle = 0
        self._backlog: dict[int, deque[int]] = {}
        self._heap: list[tuple[float, int, int]] = []
        self._seq = 0

        self.clock = 0
        self.injected = 0
        self.exited = 0
        self.injection_closed_at: int | None = None
        self.finalized = False
        self.queue_series: list[tuple[int, ...]] = []
        self.trace: list[Discharge] = []
        self.queue_joins: list[tuple[int, str, str]] = []  # (time, lane, vehicle) with trace=True

    # -- state queries ---------------------------------------------------------

    def lane_index(self, lane_id: str) -> int:
        return self._lane_idx[lane_id]

    def queue_length(self, lane_id: str) -> int:
        return len(self.lane_queue[self._lane_idx[lane_id]])

    def vehicle_count(self, lane_id: str) -> int:
        return self.lane_count[self._lane_idx[lane_id]]

    @property
    def scheduled(self) -> int:
        """Vehicles released by the demand schedule so far (entered or waiting to enter)."""
        return self._next_vehicle

    @property
    def backlog_size(self) -> int:
        return sum(len(b) for b in self._backlog.values())

    @property
    def on_lanes(self) -> int:
        return sum(self.lane_count)

    def ready_intersections(self) -> list[str]:
        return [iid for iid in self.inter_ids if self.signals[iid].ready]

    def lane_observation(self, lane_id: str, time: int | None = None) -> LaneObservation:
        k = self._lane_idx[lane_id]
        t = self.clock if time is None else time
        length, speed = self.lane_length[k], self.lane_speed[k]
        seg = [0] * N_SEGMENTS
        q = len(self.lane_queue[k])
        seg[0] += q
        for vid in self.lane_moving[k]:
            pos = min(length, max(0.0, (t - self.vehicles[vid].lane_entry) * speed))
            seg[min(int((length - pos) // SEGMENT_LENGTH), N_SEGMENTS - 1)] += 1
        return LaneObservation(q, q + len(self.lane_moving[k]), tuple(seg))

    def observe(self, intersection: str) -> IntersectionObservation:
        inter = self.network.intersections[intersection]
        lanes = {lid: self.lane_observation(lid) for lid in inter.incoming_lanes}
        for lid in inter.outgoing_lanes:
            lanes[lid] = self.lane_observation(lid)
        return IntersectionObservation(intersection, self.clock, lanes, replace(self.signals[intersection]))

    def vehicle_positions(self, lane_id: str) -> list[tuple[str, float]]:
        """(vehicle id, meters from lane start) for every vehicle on the lane."""
        k = self._lane_idx[lane_id]
        length, speed = self.lane_length[k], self.lane_speed[k]
        out = [(self.vehicles[v].spec_id, min(length, max(0.0, (self.clock - self.vehicles[v].lane_entry) * speed)))
               for v in self.lane_moving[k]]
        out.extend((self.vehicles[v].spec_id, length) for v in self.lane_queue[k])
        return out

    # -- control ---------------------------------------------------------------

    def set_phase(self, intersection: str, phase: str, duration: int) -> None:
        inter = self.network.intersections.get(intersection)
        if inter is None:
            raise InvalidArgument(f"unknown intersection {intersection!r}")
        if phase not in inter.phase_ids:
            raise InvalidArgument(f"phase {phase!r} is not defined at {intersection}")
        if not isinstance(duration, int) or duration < 1:
            raise InvalidArgument(f"duration must be a positive integer, got {duration!r}")
        if self.config.duration_set is not None and duration not in self.config.duration_set:
            raise InvalidArgument(f"duration {duration} not in action set {self.config.duration_set}")
        s = self.signals[intersection]
        if s.phase is not None and phase != s.phase and self.config.amber_s > 0 and not s.in_amber:
            s.in_amber = True
            s.amber_remaining = self.config.amber_s
        s.phase = phase
        s.elapsed = 0
        s.committed_duration = duration

    # -- dynamics --------------------------------------------------------------

    def _place(self, vid: int, lane: int, entry: float) -> None:
        v = self.vehicles[vid]
        v.lane_entry = entry
        v.arrive = entry + self.lane_travel[lane]
        v.queued_at = None
        self.lane_moving[lane][vid] = None
        self.lane_count[lane] += 1
        heapq.heappush(self._heap, (v.arrive, self._seq, vid))
        self._seq += 1

    def close_injection(self) -> None:
        """Stop releasing scheduled vehicles; those already released still enter."""
        if self.injection_closed_at is None:
            self.injection_closed_at = self.clock

    def step(self) -> None:
        if self.finalized:
            raise SimulationStateError("simulation already finalized")
        t = self.clock
        vehicles = self.vehicles
        trace = self.config.trace

        # (a) release scheduled vehicles and fill entry lanes
        if self.injection_closed_at is None:
            while self._next_vehicle < len(vehicles) and vehicles[self._next_vehicle].enter_time <= t:
                v = vehicles[self._next_vehicle]
                self._backlog.setdefault(v.route[0], deque()).append(v.vid)
                self._next_vehicle += 1
        for lane, waiting in self._backlog.items():
            cap = self.lane_cap[lane]
            while waiting and self.lane_count[lane] < cap:
                self._place(waiting.popleft(), lane, float(t))
                self.injected += 1

        # (b) arrivals at stop lines and network exits
        heap = self._heap
        while heap and heap[0][0] <= t:
            _, _, vid = heapq.heappop(heap)
            v = vehicles[vid]
            lane = v.lane
            del self.lane_moving[lane][vid]
            if v.route_index == len(v.route) - 1:
                v.exit_time = t
                self.lane_count[lane] -= 1
                self.exited += 1
            else:
                v.queued_at = t
                self.lane_queue[lane].append(vid)
                if trace:
                    self.queue_joins.append((t, self.lane_ids[lane], v.spec_id))

        # (c) discharge through green movements
        free_at, headway, window = self._mov_free_at, self._headway, t + 1 - 1e-9
        for k, iid in enumerate(self.inter_ids):
            s = self.signals[iid]
            if s.in_amber:
                continue
            green = self._green[k][s.phase]
            for lane in self._inter_in_lanes[k]:
                queue = self.lane_queue[lane]
                while queue:
                    v = vehicles[queue[0]]
                    nxt = v.route[v.route_index + 1]
                    mov = self._transition[(lane, nxt)]
                    if mov not in green or free_at[mov] >= window or self.lane_count[nxt] >= self.lane_cap[nxt]:
                        break
                    queue.popleft()
                    free_at[mov] = max(free_at[mov], t) + headway
                    self.lane_count[lane] -= 1
                    entry = v.arrive + (t - v.queued_at) + 1
                    v.route_index += 1
                    self._place(v.vid, nxt, entry)
                    if trace:
                        self.trace.append(Discharge(t, iid, self.movement_ids[mov], v.spec_id,
                                                    self.lane_ids[lane], self.lane_ids[nxt]))

        # (d) signal timers
        for s in self.signals.values():
            if s.in_amber:
                s.amber_remaining -= 1
                if s.amber_remaining <= 0:
                    s.in_amber = False
                    s.amber_remaining = 0
            elif s.phase is not None and s.elapsed < s.committed_duration:
                s.elapsed += 1

        self.queue_series.append(tuple(sum(len(self.lane_queue[l]) for l in lanes) for lanes in self._inter_in_lanes))
        self.clock = t + 1

    def all_exited(self) -> bool:
        """True once every vehicle released before injection closed has left the network."""
        if self.injection_closed_at is None:
            return False
        return self.exited == self._next_vehicle

    def trip_log(self) -> TripLog:
        released = self.vehicles[: self._next_vehicle] if self.injection_closed_at is not None else self.vehicles
        return TripLog(
            enter={v.spec_id: v.enter_time for v in released},
            exit={v.spec_id: v.exit_time for v in released},
            end_time=self.clock,
            queue_series=list(self.queue_series),
        )

    def finalize(self) -> TripLog:
        log = self.trip_log()
        self.finalized = True
        return log


def run_episode(network: Network, flow: FlowSet, controller, horizon_s: int, drain: bool = True, seed: int = 0,
                config: SimConfig | None = None, drain_factor: int = 4, return_log: bool = False):
    """Simulate one episode under ``controller``.

    Vehicles are released until ``horizon_s``. With ``drain`` the engine keeps
    stepping until every released vehicle has exited or the clock reaches
    ``drain_factor * horizon_s``; hitting that cap marks the result undrained.
    Returns an :class:`EpisodeResult`, or ``(result, trip_log)`` with ``return_log``.
    """
    if not horizon_s > 0:
        raise InvalidArgument(f"horizon_s must be positive, got {horizon_s}")
    sim = Simulator(network, flow, config)
    controller.reset(sim, seed)
    cap = drain_factor * horizon_s
    while True:
        if sim.clock >= horizon_s:
            sim.close_injection()
            if not drain or sim.all_exited() or sim.clock >= cap:
                break
        controller.tick(sim)
        sim.step()
    log = sim.finalize()
    result = episode_result(log, decisions=getattr(controller, "log", ()), horizon=horizon_s)
    return (result, log) if return_log else result
