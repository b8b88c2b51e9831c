"""Queue-based traffic signal control benchmark with phase/duration two-level control."""

from .agent import (DURATION_SETS, DurationActionSet, DynLightConfig, DynLightController, encode_state,
                    load_checkpoint, make_dynlight_c, reward, save_checkpoint, train)
from .datasets import PRESETS, get_preset
from .flow import FlowSet, VehicleSpec, gen_poisson_flow, load_flow, save_flow
from .metrics import EpisodeResult, TripLog, adjusted_att, summarize, transferability
from .network import Network, build_grid, load_roadnet, phase_lanes, save_roadnet
from .policies import (FixedTimeController, PhasePolicyController, cyclical_next, efficient_max_pressure,
                       fixed_time, max_queue_length)
from .sim import SimConfig, Simulator, run_episode

__version__ = "0.1.0"
