"""Episode metrics: adjusted average travel time, throughput, transferability, summaries."""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
from collections import Counter
from dataclasses import asdict, dataclass, field

from .errors import InvalidArgument, UndefinedMetric

log = logging.getLogger(__name__)


@dataclass
class TripLog:
    enter: dict[str, int]
    exit: dict[str, int | None]
    end_time: int
    queue_series: list[tuple[int, ...]] = field(default_factory=list)

    @property
    def undrained(self) -> bool:
        return any(t is None for t in self.exit.values())

    @property
    def throughput(self) -> int:
        return sum(1 for t in self.exit.values() if t is not None)


def write_trip_csv(trip_log: TripLog, path) -> None:
    """``vehicle_id, enter, exit`` rows; exit is empty for vehicles still in the network."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["vehicle_id", "enter", "exit"])
        for vid, enter in trip_log.enter.items():
            out = trip_log.exit.get(vid)
            w.writerow([vid, enter, "" if out is None else out])


def adjusted_att(trip_log: TripLog) -> float:
    """Mean travel time over every released vehicle.

    Vehicles still in the network when the log ends contribute
    ``end_time - enter_time``, which makes the value a lower bound for
    undrained episodes (check ``trip_log.undrained``).
    """
    if not trip_log.enter:
        raise UndefinedMetric("adjusted ATT of an empty trip log")
    total = 0
    for vid, enter in trip_log.enter.items():
        out = trip_log.exit.get(vid)
        total += (trip_log.end_time if out is None else out) - enter
    return total / len(trip_log.enter)


def classic_att(trip_log: TripLog) -> float:
    """Mean travel time over vehicles that exited."""
    times = [out - trip_log.enter[vid] for vid, out in trip_log.exit.items() if out is not None]
    if not times:
        raise UndefinedMetric("no vehicle exited")
    return sum(times) / len(times)


def transferability(t_train: float, t_transfer: float) -> float:
    if not t_train > 0:
        raise InvalidArgument(f"t_train must be positive, got {t_train}")
    return t_transfer / t_train - 1.0


@dataclass
class EpisodeResult:
    adjusted_att: float | None
    throughput: int
    n_vehicles: int
    undrained: bool
    end_time: int
    queue_series: list[int]
    decisions: dict = field(default_factory=dict)
    att_exited: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("adjusted_att", "att_exited"):
            if d[key] is not None:
                d[key] = round(d[key], 6)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeResult":
        return cls(**d)


def decision_summary(decisions) -> dict:
    decisions = list(decisions)
    durations = Counter(d.duration for d in decisions)
    phases = Counter(d.phase for d in decisions)
    return {
        "count": len(decisions),
        "durations": {str(k): durations[k] for k in sorted(durations)},
        "phases": {k: phases[k] for k in sorted(phases)},
    }


def episode_result(trip_log: TripLog, decisions=(), horizon: int | None = None) -> EpisodeResult:
    n = len(trip_log.enter)
    adj = adjusted_att(trip_log) if n else None
    try:
        att = classic_att(trip_log)
    except UndefinedMetric:
        att = None
    return EpisodeResult(
        adjusted_att=adj,
        throughput=trip_log.throughput,
        n_vehicles=n,
        undrained=trip_log.undrained,
        end_time=trip_log.end_time,
        queue_series=[sum(row) for row in trip_log.queue_series],
        decisions=decision_summary(decisions),
        att_exited=att,
    )


@dataclass(frozen=True)
class SummaryRow:
    mean: float
    sd: float | None
    per_seed: tuple[float, ...]
    episodes_used: int


def summarize(results, last: int = 10) -> SummaryRow:
    """Mean of the last ``last`` episodes per seed, then mean/sd across seeds.

    ``results`` is a list with one entry per seed; each entry is a sequence of
    :class:`EpisodeResult` (or plain numbers) in episode order. A flat list of
    results is treated as a single seed. The standard deviation is the sample
    deviation and is ``None`` for a single seed.
    """
    if not results:
        raise InvalidArgument("summarize needs at least one result")
    if not isinstance(results[0], (list, tuple)):
        results = [results]
    per_seed = []
    used = last
    for seed_results in results:
        if not seed_results:
            raise InvalidArgument("empty result list for a seed")
        if len(seed_results) < last:
            log.warning("only %d episodes available, wanted last %d", len(seed_results), last)
        tail = list(seed_results)[-last:]
        used = min(used, len(tail))
        values = [r.adjusted_att if isinstance(r, EpisodeResult) else float(r) for r in tail]
        per_seed.append(sum(values) / len(values))
    mean = sum(per_seed) / len(per_seed)
    sd = statistics.stdev(per_seed) if len(per_seed) > 1 else None
    return SummaryRow(mean, sd, tuple(per_seed), used)


def fmt(x: float | None) -> str:
    """Two-decimal rendering used in every results table."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.2f}"
