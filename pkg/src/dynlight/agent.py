"""Two-level signal control: a phase selector picks the phase, a shared dueling Q-network picks its green time.

Each intersection decides asynchronously, whenever its committed green runs
out. The state given to the Q-network is the per-lane feature block of the lanes
served by the phase that was just selected, so the duration is chosen knowing
which movements it will serve.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvalidArgument, TrainingDiverged
from .flow import FlowSet
from .metrics import EpisodeResult, summarize
from .network import Intersection, Network, phase_lanes
from .policies import Controller, CyclicalSelector, PhasePolicyController, make_selector, movement_pressure
from .qnet import AdamState, QNetwork, ReplayBuffer, Transition, forward, init_qnetwork, net_from_dict, net_to_dict, \
    train_step
from .sim import SimConfig, run_episode

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dynlight-checkpoint/1"
CHECKPOINT_VERSION = 1


# duration action sets ---------------------------------------------------------------

@dataclass(frozen=True)
class DurationActionSet:
    seconds: tuple[int, ...]
    name: str = "custom"

    def __post_init__(self):
        s = tuple(self.seconds)
        if not s:
            raise InvalidArgument("duration action set is empty")
        if any(not isinstance(x, (int, np.integer)) or x < 1 for x in s):
            raise InvalidArgument(f"durations must be integers >= 1, got {s}")
        if any(b <= a for a, b in zip(s, s[1:])):
            raise InvalidArgument(f"durations must be strictly increasing, got {s}")
        object.__setattr__(self, "seconds", tuple(int(x) for x in s))

    def __len__(self):
        return len(self.seconds)

    def __getitem__(self, k):
        return self.seconds[k]

    def __iter__(self):
        return iter(self.seconds)


DURATION_SETS = {
    "Config1": DurationActionSet((10, 20, 30, 40), "Config1"),
    "Config2": DurationActionSet(tuple(range(10, 41, 5)), "Config2"),
    "Config3": DurationActionSet(tuple(range(10, 41, 3)), "Config3"),
    "Config4": DurationActionSet((10, 15, 20), "Config4"),
    "Config5": DurationActionSet(tuple(range(10, 61, 5)), "Config5"),
}
DEFAULT_DURATION_SET = "Config2"


def duration_set(spec) -> DurationActionSet:
    """Resolve a registry name, a sequence of seconds, or an existing set."""
    if isinstance(spec, DurationActionSet):
        return spec
    if isinstance(spec, str):
        try:
            return DURATION_SETS[spec]
        except KeyError:
            raise ConfigError(f"unknown duration set {spec!r}; valid: {sorted(DURATION_SETS)}") from None
    return DurationActionSet(tuple(spec))


# state encoders and reward ----------------------------------------------------------

ENCODER_WIDTH = {"nvs": 4, "nv": 1, "ql": 1, "tmp": 1}


def _phase_movement(phase, lane_id):
    for m in phase.movements:
        if m.in_lane == lane_id:
            return m
    raise InvalidArgument(f"lane {lane_id} is not served by phase {phase.id}")


def encode_state(kind: str, observations, phase, intersection: Intersection) -> np.ndarray:
    """Feature block of shape (lanes served by ``phase``, width of ``kind``).

    nvs: vehicles per 100 m segment, nearest segment first; nv: vehicles on the
    lane; ql: queued vehicles; tmp: pressure of the lane's movement in the phase.
    Rows follow :func:`dynlight.network.phase_lanes` order.
    """
    if kind not in ENCODER_WIDTH:
        raise InvalidArgument(f"unknown encoder {kind!r}; valid: {sorted(ENCODER_WIDTH)}")
    if isinstance(phase, str):
        phase = intersection.phase(phase)
    lanes = phase_lanes(intersection, phase)
    rows = []
    for lane_id in lanes:
        obs = observations[lane_id]
        if kind == "nvs":
            rows.append(list(obs.x_seg))
        elif kind == "nv":
            rows.append([obs.x])
        elif kind == "ql":
            rows.append([obs.q])
        else:
            rows.append([movement_pressure(observations, _phase_movement(phase, lane_id))])
    return np.array(rows, dtype=float).reshape(len(lanes), ENCODER_WIDTH[kind])


def controlled_lanes(intersection: Intersection) -> list[str]:
    seen = []
    for m in intersection.controlled_movements:
        if m.in_lane not in seen:
            seen.append(m.in_lane)
    return seen


def reward(observations, intersection: Intersection) -> float:
    """Negative total queue over the signal-controlled incoming lanes."""
    return -float(sum(observations[l].q for l in controlled_lanes(intersection)))


def pressure_reward(observations, intersection: Intersection) -> float:
    """Negative absolute intersection pressure, the reward paired with the pressure phase policy."""
    return -abs(float(sum(movement_pressure(observations, m) for m in intersection.controlled_movements)))


REWARDS = {"queue": reward, "pressure": pressure_reward}


# configuration ----------------------------------------------------------------------

@dataclass
class DynLightConfig:
    phase_policy: str = "mql"
    encoder: str = "nvs"
    duration_set: str | tuple = DEFAULT_DURATION_SET
    reward: str | None = None  # None: "pressure" for emp, else "queue"
    episodes: int = 80
    horizon: int = 3600
    gamma: float = 0.8
    lr: float = 1e-3
    clip_norm: float = 5.0
    batch_size: int = 64
    buffer_capacity: int = 12000
    target_sync: int = 200
    updates_per_decision: int = 1
    eps_start: float = 0.8
    eps_end: float = 0.05
    eps_fraction: float = 0.6
    embed_width: int = 20
    hidden: tuple = (20, 20)
    feature_scale: float = 0.1
    reward_scale: float = 0.02
    last_n: int = 10
    divergence_loss: float = 1e6
    seed: int = 0
    sim: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.encoder not in ENCODER_WIDTH:
            raise ConfigError(f"unknown encoder {self.encoder!r}; valid: {sorted(ENCODER_WIDTH)}")
        if self.phase_policy not in ("mql", "emp", "cyclical"):
            raise ConfigError(f"unknown phase policy {self.phase_policy!r}; valid: ['cyclical', 'emp', 'mql']")
        if self.reward is not None and self.reward not in REWARDS:
            raise ConfigError(f"unknown reward {self.reward!r}; valid: {sorted(REWARDS)}")
        if not 0 <= self.gamma < 1:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.episodes < 0 or self.horizon <= 0:
            raise ConfigError("episodes must be >= 0 and horizon > 0")
        if not isinstance(self.duration_set, str):
            self.duration_set = tuple(self.duration_set)
        self.hidden = tuple(self.hidden)
        duration_set(self.duration_set)

    @property
    def actions(self) -> DurationActionSet:
        return duration_set(self.duration_set)

    @property
    def reward_name(self) -> str:
        if self.reward is not None:
            return self.reward
        return "pressure" if self.phase_policy == "emp" else "queue"

    def sim_config(self) -> SimConfig:
        return SimConfig(**{**self.sim, "duration_set": self.actions.seconds})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["duration_set"] = self.duration_set if isinstance(self.duration_set, str) else list(self.duration_set)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DynLightConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def epsilon_at(episode: int, episodes: int, start: float = 0.8, end: float = 0.05, fraction: float = 0.6) -> float:
    """Linear decay from ``start`` to ``end`` over the first ``fraction`` of training."""
    span = fraction * episodes
    if span <= 0:
        return end
    return start + (end - start) * min(1.0, episode / span)


# controller -------------------------------------------------------------------------

@dataclass
class Learner:
    """Shared Q-network, target copy, replay buffer and optimizer state."""
    net: QNetwork
    target: QNetwork
    buffer: ReplayBuffer
    opt: AdamState
    batch_size: int = 64
    gamma: float = 0.8
    target_sync: int = 200
    reward_scale: float = 1.0
    divergence_loss: float = 1e6
    updates: int = 0
    losses: list = field(default_factory=list)

    def update(self) -> float | None:
        loss = train_step(self.net, self.target, self.buffer, self.batch_size, self.gamma, self.opt,
                          reward_scale=self.reward_scale)
        if loss is None:
            return None
        if not np.isfinite(loss) or loss > self.divergence_loss:
            raise TrainingDiverged(f"loss {loss:.4g} after {self.updates} updates exceeds {self.divergence_loss:g}")
        self.updates += 1
        self.losses.append(loss)
        if self.updates % self.target_sync == 0:
            self.target.load_params(self.net.params())
        return loss


class DynLightController(Controller):
    """Phase from ``selector``; duration by epsilon-greedy over the Q-network.

    With a ``learner`` each decision after an intersection's first closes the
    previous transition of that intersection: its reward is read at the moment
    of the new decision and its next state is the block the new decision encodes.
    """

    def __init__(self, selector, net: QNetwork, encoder: str, actions, epsilon: float = 0.0,
                 learner: Learner | None = None, reward_fn=reward, feature_scale: float = 1.0,
                 updates_per_decision: int = 1, name: str | None = None):
        self.selector = selector
        self.net = net
        self.encoder = encoder
        self.actions = duration_set(actions)
        if net.n_actions != len(self.actions):
            raise ConfigError(f"network has {net.n_actions} outputs, duration set has {len(self.actions)} values")
        if net.n_features != ENCODER_WIDTH[encoder]:
            raise ConfigError(f"network expects {net.n_features} features, encoder {encoder} gives "
                              f"{ENCODER_WIDTH[encoder]}")
        self.epsilon = epsilon
        self.learner = learner
        self.reward_fn = reward_fn
        self.feature_scale = feature_scale
        self.updates_per_decision = updates_per_decision
        self.name = name or ("dynlight-c" if isinstance(selector, CyclicalSelector) else "dynlight")
        self.transitions = 0

    def reset(self, sim, seed=0):
        super().reset(sim, seed)
        self.selector.reset(sim)
        self.rng = np.random.default_rng(seed)
        self.pending: dict[str, tuple] = {}
        self.transitions = 0

    def q_values(self, state: np.ndarray) -> np.ndarray:
        """Q-values for an already scaled feature block."""
        return forward(self.net, state)[0]

    def choose(self, state: np.ndarray) -> int:
        n = len(self.actions)
        if self.epsilon >= 1.0 or (self.epsilon > 0 and self.rng.random() < self.epsilon):
            return int(self.rng.integers(n))
        return int(np.argmax(self.q_values(state)))

    def decide(self, sim, iid):
        inter = sim.network.intersections[iid]
        obs = sim.observe(iid)
        phase = self.selector.select(sim, iid, obs).phase
        state = encode_state(self.encoder, obs.lanes, phase, inter) * self.feature_scale
        mask = np.ones(state.shape[0])
        if self.learner is not None:
            prev = self.pending.get(iid)
            if prev is not None:
                r = self.reward_fn(obs.lanes, inter)
                self.learner.buffer.push(Transition(prev[0], prev[1], prev[2], r, state, mask, False))
                self.transitions += 1
                for _ in range(self.updates_per_decision):
                    self.learner.update()
        a = self.choose(state)
        self.pending[iid] = (state, mask, a)
        return phase, self.actions[a]


class RandomDurationController(PhasePolicyController):
    """Phase selector with a uniformly random duration per decision (the untrained baseline)."""

    def __init__(self, selector, actions):
        super().__init__(selector)
        self.actions = duration_set(actions)
        self.name = f"{selector.name}-random"

    def reset(self, sim, seed=0):
        super().reset(sim, seed)
        self.rng = np.random.default_rng(seed)

    def decide(self, sim, iid):
        phase = self.selector.select(sim, iid).phase
        return phase, self.actions[int(self.rng.integers(len(self.actions)))]


# training ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    net: QNetwork
    config: DynLightConfig

    @property
    def actions(self) -> DurationActionSet:
        return self.config.actions

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "duration_set": list(self.actions.seconds),
            "encoder": self.config.encoder,
            "net": net_to_dict(self.net),
        }


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    curve: list[EpisodeResult]
    losses: list[float]
    transitions: int

    @property
    def final(self) -> float:
        return summarize(self.curve, last=self.checkpoint.config.last_n).mean

    @property
    def att_curve(self) -> list[float]:
        return [r.adjusted_att for r in self.curve]


def new_learner(config: DynLightConfig, rng: np.random.Generator) -> Learner:
    net = init_qnetwork(ENCODER_WIDTH[config.encoder], len(config.actions), config.embed_width, config.hidden, rng)
    return Learner(
        net=net,
        target=net.copy(),
        buffer=ReplayBuffer(config.buffer_capacity, seed=int(rng.integers(2**31))),
        opt=AdamState(lr=config.lr, clip_norm=config.clip_norm),
        batch_size=config.batch_size,
        gamma=config.gamma,
        target_sync=config.target_sync,
        reward_scale=config.reward_scale,
        divergence_loss=config.divergence_loss,
    )


def train(network: Network, flow: FlowSet, config: DynLightConfig, progress=None) -> TrainResult:
    """Train one shared duration network and evaluate it greedily after every episode.

    Training episodes stop at the horizon; each is followed by a drained
    evaluation episode with epsilon 0, which forms the learning curve. With zero
    episodes a single evaluation with epsilon 1 (random durations) is returned.
    """
    rng = np.random.default_rng(config.seed)
    learner = new_learner(config, rng)
    sim_cfg = config.sim_config()
    reward_fn = REWARDS[config.reward_name]

    def controller(eps, learn):
        return DynLightController(make_selector(config.phase_policy), learner.net, config.encoder, config.actions,
                                  epsilon=eps, learner=learner if learn else None, reward_fn=reward_fn,
                                  feature_scale=config.feature_scale,
                                  updates_per_decision=config.updates_per_decision)

    curve, transitions = [], 0
    if config.episodes == 0:
        curve.append(run_episode(network, flow, controller(1.0, False), config.horizon, drain=True,
                                 seed=config.seed, config=sim_cfg))
    for ep in range(config.episodes):
        eps = epsilon_at(ep, config.episodes, config.eps_start, config.eps_end, config.eps_fraction)
        trainer = controller(eps, True)
        ep_seed = config.seed * 100003 + ep
        try:
            run_episode(network, flow, trainer, config.horizon, drain=False, seed=ep_seed, config=sim_cfg)
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"episode {ep}: {exc}") from exc
        transitions += trainer.transitions
        result = run_episode(network, flow, controller(0.0, False), config.horizon, drain=True, seed=ep_seed,
                             config=sim_cfg)
        curve.append(result)
        if progress is not None:
            progress(ep, eps, result)
        log.info("episode %d eps %.3f att %.2f", ep, eps, result.adjusted_att or float("nan"))
    return TrainResult(Checkpoint(learner.net, config), curve, learner.losses, transitions)


# checkpoints ------------------------------------------------------------------------

def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    Path(path).write_text(json.dumps(checkpoint.to_dict()), encoding="utf-8")


def checkpoint_from_dict(d: dict, actions=None) -> Checkpoint:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"not a checkpoint (format {d.get('format')!r})")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {d.get('version')!r}")
    config = DynLightConfig.from_dict(d["config"])
    if config.hash() != d.get("config_hash"):
        raise ConfigError("checkpoint config hash does not match its config")
    net = net_from_dict(d["net"])
    if net.n_actions != len(d["duration_set"]):
        raise ConfigError("checkpoint network width does not match its duration set")
    ckpt = Checkpoint(net, config)
    if actions is not None:
        check_duration_set(ckpt, actions)
    return ckpt


def load_checkpoint(path, actions=None) -> Checkpoint:
    """Read a checkpoint; with ``actions`` given, reject a different duration set."""
    return checkpoint_from_dict(json.loads(Path(path).read_text(encoding="utf-8")), actions)


def check_duration_set(checkpoint: Checkpoint, actions) -> None:
    want = duration_set(actions)
    have = checkpoint.actions
    if len(want) != len(have):
        raise ConfigError(f"checkpoint has {len(have)} duration actions {have.seconds}, runtime expects "
                          f"{len(want)} {want.seconds}")
    if want.seconds != have.seconds:
        raise ConfigError(f"checkpoint duration set {have.seconds} differs from runtime {want.seconds}")


def make_controller(checkpoint: Checkpoint, phase_policy: str | None = None, actions=None) -> DynLightController:
    """Greedy frozen controller from a checkpoint, optionally with a different phase policy."""
    if actions is not None:
        check_duration_set(checkpoint, actions)
    cfg = checkpoint.config
    return DynLightController(make_selector(phase_policy or cfg.phase_policy), checkpoint.net, cfg.encoder,
                              cfg.actions, epsilon=0.0, feature_scale=cfg.feature_scale)


def make_dynlight_c(checkpoint: Checkpoint, actions=None) -> DynLightController:
    """Cyclical phase order with the checkpoint's frozen duration network; never learns."""
    return make_controller(checkpoint, "cyclical", actions)
