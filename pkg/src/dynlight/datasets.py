"""Synthetic dataset presets: grid shapes and average arrival rates of the public benchmark datasets.

The demand is generated Poisson traffic, not the recorded flows; preset names
carry a ``synthetic`` label in their description for that reason.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .flow import FlowSet, gen_poisson_flow
from .network import Network, build_grid


@dataclass(frozen=True)
class DatasetPreset:
    name: str
    rows: int
    cols: int
    ew_length: float
    ns_length: float
    rate: float
    description: str
    horizon: int = 3600
    ew_weight: float = 1.0  # relative demand of east-west entry roads over north-south ones

    def network(self, phase_mode: int = 4) -> Network:
        return build_grid(self.rows, self.cols, self.ew_length, self.ns_length, phase_mode)

    def flow(self, network: Network, seed: int, rate: float | None = None, horizon: int | None = None) -> FlowSet:
        weights = None
        if self.ew_weight != 1.0:
            # generated grid road ids end in their heading: 0 east, 1 north, 2 west, 3 south
            weights = {r.id: self.ew_weight if r.id[-1] in "02" else 1.0 for r in network.entry_roads}
        return gen_poisson_flow(network, rate or self.rate, self.horizon if horizon is None else horizon, seed,
                                entry_weights=weights, source=self.name)


PRESETS = {
    p.name: p
    for p in (
        DatasetPreset("jinan_1", 3, 4, 400, 800, 1.75, "synthetic JiNan-like 3x4 grid, 1.75 veh/s"),
        DatasetPreset("jinan_2", 3, 4, 400, 800, 1.21, "synthetic JiNan-like 3x4 grid, 1.21 veh/s"),
        DatasetPreset("jinan_3", 3, 4, 400, 800, 1.53, "synthetic JiNan-like 3x4 grid, 1.53 veh/s"),
        DatasetPreset("hangzhou_1", 4, 4, 800, 600, 0.83, "synthetic HangZhou-like 4x4 grid, 0.83 veh/s"),
        DatasetPreset("hangzhou_2", 4, 4, 800, 600, 1.94, "synthetic HangZhou-like 4x4 grid, 1.94 veh/s"),
        DatasetPreset("jinan_bench", 3, 4, 400, 800, 1.2, "synthetic JiNan-like 3x4 grid at the 1.2 veh/s benchmark load"),
        # arterial crossing a collector at 2:1 demand; the arterial through lanes carry exactly
        # the capacity of the equal-split 4x15 s fixed plan (1.875 * 2/6 * 1/3 = 15/72 veh/s)
        DatasetPreset("single", 1, 1, 300, 300, 1.875,
                      "synthetic isolated arterial/collector intersection, 1.875 veh/s, 2:1 east-west", ew_weight=2.0),
    )
}


def get_preset(name: str) -> DatasetPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown dataset {name!r}; valid: {sorted(PRESETS)}") from None
