"""Step-by-step soundness checks for the simulator, recomputed from raw vehicle state."""

import math
from collections import Counter, defaultdict

from dynlight.sim import SimConfig, Simulator


def run_checked(network, flow, controller, horizon, config=None, seed=0, drain=True):
    """Run an episode step by step; return (violations, trip_log, sim).

    ``violations`` maps each property name to a list of human-readable failures.
    """
    base = config or SimConfig()
    cfg = SimConfig(**{**base.__dict__, "trace": True})
    sim = Simulator(network, flow, cfg)
    controller.reset(sim, seed)
    bad = defaultdict(list)
    amber_steps = defaultdict(set)
    cap = 4 * horizon
    while True:
        if sim.clock >= horizon:
            sim.close_injection()
            if not drain or sim.all_exited() or sim.clock >= cap:
                break
        controller.tick(sim)
        for iid, s in sim.signals.items():
            if s.in_amber:
                amber_steps[iid].add(sim.clock)
        sim.step()
        on_lanes = sum(len(m) + len(q) for m, q in zip(sim.lane_moving, sim.lane_queue))
        exited = sum(1 for v in sim.vehicles if v.exit_time is not None)
        if on_lanes != sum(sim.lane_count):
            bad["conservation"].append(f"t={sim.clock}: lane counters {sum(sim.lane_count)} != {on_lanes}")
        if sim.injected != exited + on_lanes:
            bad["conservation"].append(f"t={sim.clock}: injected {sim.injected} != {exited} + {on_lanes}")
        for iid, s in sim.signals.items():
            if not 0 <= s.elapsed <= max(s.committed_duration, 0):
                bad["signal"].append(f"t={sim.clock}: {iid} elapsed {s.elapsed} / {s.committed_duration}")
    log = sim.finalize()

    # FIFO: per lane, discharge order equals queue-join order
    joins, leaves = defaultdict(list), defaultdict(list)
    for t, lane, vid in sim.queue_joins:
        joins[lane].append(vid)
    for d in sim.trace:
        leaves[d.from_lane].append(d.vehicle)
    for lane, order in leaves.items():
        if joins[lane][: len(order)] != order:
            bad["fifo"].append(f"lane {lane}: discharge order differs from arrival order")

    # discharge bound per movement per second
    per_second = Counter((d.time, d.movement) for d in sim.trace)
    limit = max(1, math.ceil(cfg.sat_rate))
    for (t, mov), n in per_second.items():
        if n > limit:
            bad["discharge_bound"].append(f"t={t}: {mov} discharged {n}")

    # no discharge at an intersection while it shows amber
    for d in sim.trace:
        if d.time in amber_steps[d.intersection]:
            bad["amber"].append(f"t={d.time}: {d.vehicle} crossed {d.intersection} during amber")

    # exit time never beats the free-flow traversal
    for v in flow.vehicles:
        out = log.exit.get(v.id)
        if out is None:
            continue
        lanes = [network.lanes[l] for l in v.route]
        free = sum(l.length / (cfg.free_flow_speed or l.free_flow_speed) for l in lanes)
        minimal = math.ceil(free - 1e-9) + len(v.route) - 1
        if out - v.enter_time < minimal:
            bad["min_travel"].append(f"{v.id}: {out - v.enter_time} < {minimal}")
        if out < v.enter_time:
            bad["min_travel"].append(f"{v.id}: exit before entry")
    return dict(bad), log, sim
