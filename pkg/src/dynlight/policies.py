"""Classical phase selection: FixedTime, Max-QueueLength, Efficient-MaxPressure, cyclical order.

The scoring functions are pure: they read lane observations (anything with a
``q`` attribute, keyed by lane id) and return a :class:`PhaseDecision`. Ties go
to the lowest phase index. The controller classes at the bottom wrap them for
use with :func:`dynlight.sim.run_episode`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import InvalidArgument
from .network import Intersection, Movement, phase_lanes

DEFAULT_GREEN = 15


@dataclass(frozen=True)
class PhaseDecision:
    phase: str
    score: float | None = None


@dataclass(frozen=True)
class Decision:
    """A set_phase call issued by a controller."""
    time: int
    intersection: str
    phase: str
    duration: int


def _argmax(intersection: Intersection, scores) -> PhaseDecision:
    best, best_score = None, None
    for phase, score in zip(intersection.phases, scores):
        if best_score is None or score > best_score:
            best, best_score = phase.id, score
    return PhaseDecision(best, best_score)


def phase_queue(observations, intersection: Intersection, phase) -> float:
    return sum(observations[l].q for l in phase_lanes(intersection, phase))


def max_queue_length(observations, intersection: Intersection) -> PhaseDecision:
    """Phase whose permitted in-lanes hold the most queued vehicles."""
    return _argmax(intersection, [phase_queue(observations, intersection, p) for p in intersection.phases])


def movement_pressure(observations, movement: Movement) -> float:
    """In-lane queue minus the mean queue over the movement's out lanes."""
    down = sum(observations[m].q for m in movement.out_lanes) / len(movement.out_lanes)
    return observations[movement.in_lane].q - down


def phase_pressure(observations, phase) -> float:
    return sum(movement_pressure(observations, m) for m in phase.movements)


def efficient_max_pressure(observations, intersection: Intersection) -> PhaseDecision:
    """Phase with the largest summed efficient pressure over its movements.

    ``observations`` must include the outgoing lanes.
    """
    return _argmax(intersection, [phase_pressure(observations, p) for p in intersection.phases])


def default_plan(intersection: Intersection, green: int = DEFAULT_GREEN) -> tuple[tuple[str, int], ...]:
    return tuple((p.id, green) for p in intersection.phases)


def _plan_slot(clock: int, cycle_plan) -> tuple[int, int]:
    if not cycle_plan:
        raise InvalidArgument("cycle plan is empty")
    if any(sec <= 0 for _, sec in cycle_plan):
        raise InvalidArgument("cycle plan durations must be positive")
    t = clock % sum(sec for _, sec in cycle_plan)
    for k, (_, sec) in enumerate(cycle_plan):
        if t < sec:
            return k, sec - t
        t -= sec
    raise AssertionError("unreachable")


def fixed_time(clock: int, intersection: Intersection | None, cycle_plan=None) -> PhaseDecision:
    """Phase active at ``clock`` under a repeating (phase, seconds) plan.

    Without a plan every phase of ``intersection`` gets 15 s in tuple order.
    """
    if cycle_plan is None:
        if intersection is None:
            raise InvalidArgument("need an intersection or an explicit plan")
        cycle_plan = default_plan(intersection)
    k, _ = _plan_slot(clock, cycle_plan)
    return PhaseDecision(cycle_plan[k][0])


@dataclass
class CyclicalCursor:
    index: dict[str, int] = field(default_factory=dict)


def cyclical_next(cursor: CyclicalCursor, intersection: Intersection) -> PhaseDecision:
    k = cursor.index.get(intersection.id, 0)
    if not 0 <= k < len(intersection.phases):
        raise InvalidArgument(f"cursor index {k} out of range at {intersection.id}")
    cursor.index[intersection.id] = (k + 1) % len(intersection.phases)
    return PhaseDecision(intersection.phases[k].id)


# phase selectors bound to a running simulation ---------------------------------

class MaxQueueSelector:
    name = "mql"

    def reset(self, sim):
        pass

    def select(self, sim, intersection_id: str, obs=None) -> PhaseDecision:
        obs = obs or sim.observe(intersection_id)
        return max_queue_length(obs.lanes, sim.network.intersections[intersection_id])


class EfficientPressureSelector:
    name = "emp"

    def reset(self, sim):
        pass

    def select(self, sim, intersection_id: str, obs=None) -> PhaseDecision:
        obs = obs or sim.observe(intersection_id)
        return efficient_max_pressure(obs.lanes, sim.network.intersections[intersection_id])


class CyclicalSelector:
    name = "cyclical"

    def __init__(self):
        self.cursor = CyclicalCursor()

    def reset(self, sim):
        self.cursor = CyclicalCursor()

    def select(self, sim, intersection_id: str, obs=None) -> PhaseDecision:
        return cyclical_next(self.cursor, sim.network.intersections[intersection_id])


PHASE_SELECTORS = {
    "mql": MaxQueueSelector,
    "emp": EfficientPressureSelector,
    "cyclical": CyclicalSelector,
}


def make_selector(name: str):
    try:
        return PHASE_SELECTORS[name]()
    except KeyError:
        raise InvalidArgument(f"unknown phase policy {name!r}; valid: {sorted(PHASE_SELECTORS)}") from None


# controllers ---------------------------------------------------------------------

class Controller:
    """Issues a decision for each intersection whose committed green has run out."""

    name = "controller"

    def reset(self, sim, seed: int = 0) -> None:
        self.log: list[Decision] = []

    def decide(self, sim, intersection_id: str) -> tuple[str, int]:
        raise NotImplementedError

    def tick(self, sim) -> list[Decision]:
        issued = []
        for iid in sim.ready_intersections():
            phase, duration = self.decide(sim, iid)
            sim.set_phase(iid, phase, duration)
            d = Decision(sim.clock, iid, phase, duration)
            self.log.append(d)
            issued.append(d)
        return issued


class FixedTimeController(Controller):
    """Pre-timed cycle; amber seconds are inserted between slots and do not shift the plan."""

    name = "fixedtime"

    def __init__(self, green: int = DEFAULT_GREEN, plans: dict | None = None):
        self.green = green
        self.plans = plans or {}

    def reset(self, sim, seed=0):
        super().reset(sim, seed)
        self._plan_clock = {iid: 0 for iid in sim.inter_ids}

    def decide(self, sim, iid):
        inter = sim.network.intersections[iid]
        plan = self.plans.get(iid) or default_plan(inter, self.green)
        clock = self._plan_clock[iid]
        phase = fixed_time(clock, inter, plan).phase
        _, remaining = _plan_slot(clock, plan)
        self._plan_clock[iid] = clock + remaining
        return phase, remaining


class PhasePolicyController(Controller):
    """A phase selector with a constant green duration (the classical baselines)."""

    def __init__(self, selector, duration: int = DEFAULT_GREEN):
        self.selector = selector
        self.duration = duration
        self.name = selector.name

    def reset(self, sim, seed=0):
        super().reset(sim, seed)
        self.selector.reset(sim)

    def decide(self, sim, iid):
        return self.selector.select(sim, iid).phase, self.duration
