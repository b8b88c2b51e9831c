"""Dense Q-network in plain numpy: lane embedding with additive fusion, MLP trunk, dueling head.

Input is a batch of per-lane feature blocks ``(batch, lanes, features)`` plus a
``(batch, lanes)`` mask. Every lane block goes through the same embedding layer;
the embeddings of unmasked lanes are summed, passed through the trunk, and split
into a scalar value and one advantage per duration action:

    Q[a] = V + A[a] - mean(A)

Everything runs in float64. :func:`backward` returns exact gradients of
``0.5 * mean((Q[s, a] - target) ** 2)`` with respect to every parameter.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, NumericError


@dataclass
class Dense:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ("relu", "identity"):
            raise InvalidArgument(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise InvalidArgument(f"bad layer shapes {self.weight.shape} / {self.bias.shape}")

    @property
    def n_in(self):
        return self.weight.shape[0]

    @property
    def n_out(self):
        return self.weight.shape[1]


@dataclass
class DuelingHead:
    value: Dense
    advantage: Dense


@dataclass
class QNetwork:
    embed: Dense
    trunk: list[Dense]
    head: DuelingHead

    def __post_init__(self):
        width = self.embed.n_out
        for layer in self.trunk:
            if layer.n_in != width:
                raise InvalidArgument(f"layer expects {layer.n_in} inputs, previous layer gives {width}")
            width = layer.n_out
        if self.head.value.n_in != width or self.head.advantage.n_in != width:
            raise InvalidArgument("dueling head input width does not match trunk output")
        if self.head.value.n_out != 1:
            raise InvalidArgument("value branch must output a scalar")

    @property
    def n_features(self) -> int:
        return self.embed.n_in

    @property
    def n_actions(self) -> int:
        return self.head.advantage.n_out

    def layers(self) -> list[Dense]:
        return [self.embed, *self.trunk, self.head.value, self.head.advantage]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers():
            out.extend((layer.weight, layer.bias))
        return out

    def copy(self) -> "QNetwork":
        return copy.deepcopy(self)

    def load_params(self, values) -> None:
        for dst, src in zip(self.params(), values):
            dst[...] = src


def init_qnetwork(n_features: int, n_actions: int, embed_width: int = 20, hidden=(20, 20),
                  rng: np.random.Generator | None = None) -> QNetwork:
    """He-uniform weights, zero biases."""
    rng = rng if rng is not None else np.random.default_rng(0)

    def dense(n_in, n_out, act):
        bound = math.sqrt(6.0 / n_in) if act == "relu" else math.sqrt(3.0 / n_in)
        return Dense(rng.uniform(-bound, bound, size=(n_in, n_out)), np.zeros(n_out), act)

    embed = dense(n_features, embed_width, "relu")
    trunk, width = [], embed_width
    for h in hidden:
        trunk.append(dense(width, h, "relu"))
        width = h
    head = DuelingHead(dense(width, 1, "identity"), dense(width, n_actions, "identity"))
    return QNetwork(embed, trunk, head)


def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else z


def _check_input(net: QNetwork, states, mask):
    states = np.asarray(states, dtype=float)
    if states.ndim == 2:
        states = states[None]
    if states.ndim != 3 or states.shape[2] != net.n_features:
        raise InvalidArgument(f"expected states (batch, lanes, {net.n_features}), got {states.shape}")
    if mask is None:
        mask = np.ones(states.shape[:2])
    else:
        mask = np.asarray(mask, dtype=float)
        if mask.ndim == 1:
            mask = mask[None]
        if mask.shape != states.shape[:2]:
            raise InvalidArgument(f"mask shape {mask.shape} does not match states {states.shape[:2]}")
    return states, mask


def forward(net: QNetwork, states, mask=None, return_cache: bool = False):
    """Q-values of shape (batch, actions); a single unbatched state gives batch 1."""
    states, mask = _check_input(net, states, mask)
    z_embed = states @ net.embed.weight + net.embed.bias
    h = (_act(z_embed, net.embed.activation) * mask[..., None]).sum(axis=1)
    trunk_in, trunk_z = [], []
    for layer in net.trunk:
        trunk_in.append(h)
        z = h @ layer.weight + layer.bias
        trunk_z.append(z)
        h = _act(z, layer.activation)
    value = h @ net.head.value.weight + net.head.value.bias
    adv = h @ net.head.advantage.weight + net.head.advantage.bias
    q = dueling_combine(value, adv)
    if return_cache:
        return q, (states, mask, z_embed, trunk_in, trunk_z, h)
    return q


def dueling_combine(value, advantage):
    """V + A - mean(A) along the action axis."""
    value = np.asarray(value, dtype=float)
    advantage = np.asarray(advantage, dtype=float)
    return value + advantage - advantage.mean(axis=-1, keepdims=True)


def mse_loss(net: QNetwork, states, mask, actions, targets) -> float:
    q = forward(net, states, mask)
    picked = q[np.arange(len(q)), np.asarray(actions)]
    return float(0.5 * np.mean((picked - np.asarray(targets, dtype=float)) ** 2))


def backward(net: QNetwork, states, mask, actions, targets):
    """Loss and gradients (list aligned with ``net.params()``)."""
    states = np.asarray(states, dtype=float)
    targets = np.asarray(targets, dtype=float)
    actions = np.asarray(actions)
    if not np.all(np.isfinite(states)) or not np.all(np.isfinite(targets)):
        raise NumericError("non-finite value in batch inputs")
    q, (states, mask, z_embed, trunk_in, trunk_z, h) = forward(net, states, mask, return_cache=True)
    batch = q.shape[0]
    if batch == 0:
        raise InvalidArgument("empty batch")
    if targets.shape != (batch,) or actions.shape != (batch,):
        raise InvalidArgument("actions and targets must have one entry per batch row")
    rows = np.arange(batch)
    err = q[rows, actions] - targets
    loss = float(0.5 * np.mean(err ** 2))

    dq = np.zeros_like(q)
    dq[rows, actions] = err / batch
    d_value = dq.sum(axis=1, keepdims=True)
    d_adv = dq - dq.mean(axis=1, keepdims=True)

    hv, ha = net.head.value, net.head.advantage
    grads_head = [h.T @ d_value, d_value.sum(0), h.T @ d_adv, d_adv.sum(0)]
    dh = d_value @ hv.weight.T + d_adv @ ha.weight.T

    grads_trunk = []
    for layer, x, z in zip(reversed(net.trunk), reversed(trunk_in), reversed(trunk_z)):
        dz = dh * (z > 0) if layer.activation == "relu" else dh
        grads_trunk = [x.T @ dz, dz.sum(0)] + grads_trunk
        dh = dz @ layer.weight.T

    # embedding: the fused sum broadcasts the same upstream gradient to every unmasked lane
    dz_e = dh[:, None, :] * mask[..., None]
    if net.embed.activation == "relu":
        dz_e = dz_e * (z_embed > 0)
    flat_x = states.reshape(-1, states.shape[2])
    flat_dz = dz_e.reshape(-1, dz_e.shape[2])
    grads_embed = [flat_x.T @ flat_dz, flat_dz.sum(0)]
    return loss, grads_embed + grads_trunk + grads_head


def td_target(r: float, q_next, gamma: float, done: bool) -> float:
    if not 0.0 <= gamma < 1.0:
        raise InvalidArgument(f"gamma must lie in [0, 1), got {gamma}")
    if done:
        return float(r)
    return float(r + gamma * np.max(q_next))


def td_targets(rewards, q_next, gamma, dones) -> np.ndarray:
    """Vectorised :func:`td_target` over a batch."""
    rewards = np.asarray(rewards, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    return rewards + gamma * np.where(dones, 0.0, np.max(q_next, axis=1))


# optimisation -------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 5.0
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def clip_gradients(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


def adam_update(net: QNetwork, grads, state: AdamState) -> None:
    grads, _ = clip_gradients(grads, state.clip_norm)
    if not state.m:
        state.m = [np.zeros_like(g) for g in grads]
        state.v = [np.zeros_like(g) for g in grads]
    state.t += 1
    c1 = 1 - state.beta1 ** state.t
    c2 = 1 - state.beta2 ** state.t
    for p, g, m, v in zip(net.params(), grads, state.m, state.v):
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# replay ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Transition:
    state: np.ndarray  # (lanes, features)
    mask: np.ndarray  # (lanes,)
    action: int
    reward: float
    next_state: np.ndarray
    next_mask: np.ndarray
    done: bool = False


class ReplayBuffer:
    """Fixed-capacity ring of transitions with a seeded uniform sampler."""

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 1:
            raise InvalidArgument("replay capacity must be >= 1")
        self.capacity = capacity
        self.items: list[Transition] = []
        self._cursor = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self.items)

    def push(self, transition: Transition) -> None:
        if len(self.items) < self.capacity:
            self.items.append(transition)
        else:
            self.items[self._cursor] = transition
        self._cursor = (self._cursor + 1) % self.capacity

    def sample_indices(self, n: int) -> np.ndarray:
        return self.rng.integers(0, len(self.items), size=n)

    def sample(self, n: int):
        """Stacked arrays (states, masks, actions, rewards, next_states, next_masks, dones)."""
        batch = [self.items[i] for i in self.sample_indices(n)]
        return (
            _stack([t.state for t in batch]),
            _stack([t.mask for t in batch]),
            np.array([t.action for t in batch]),
            np.array([t.reward for t in batch], dtype=float),
            _stack([t.next_state for t in batch]),
            _stack([t.next_mask for t in batch]),
            np.array([t.done for t in batch]),
        )


def _stack(arrays):
    """Stack lane blocks, zero-padding to the widest lane count."""
    width = max(a.shape[0] for a in arrays)
    if all(a.shape[0] == width for a in arrays):
        return np.stack(arrays)
    out = np.zeros((len(arrays), width) + arrays[0].shape[1:])
    for k, a in enumerate(arrays):
        out[k, : a.shape[0]] = a
    return out


def train_step(net: QNetwork, target_net: QNetwork, buffer: ReplayBuffer, batch_size: int, gamma: float,
               opt_state: AdamState, reward_scale: float = 1.0) -> float | None:
    """One Q-learning update on a uniform minibatch; None when the buffer is too small.

    ``reward_scale`` multiplies stored rewards before the target is formed.
    """
    if len(buffer) < batch_size:
        return None
    s, m, a, r, s2, m2, done = buffer.sample(batch_size)
    targets = td_targets(r * reward_scale, forward(target_net, s2, m2), gamma, done)
    loss, grads = backward(net, s, m, a, targets)
    if opt_state.lr > 0:
        adam_update(net, grads, opt_state)
    return loss


# checkpoint (de)serialisation helpers ----------------------------------------------

def net_to_dict(net: QNetwork) -> dict:
    def layer(d: Dense):
        return {"activation": d.activation, "weight": d.weight.tolist(), "bias": d.bias.tolist()}

    return {
        "embed": layer(net.embed),
        "trunk": [layer(d) for d in net.trunk],
        "value": layer(net.head.value),
        "advantage": layer(net.head.advantage),
    }


def net_from_dict(d: dict) -> QNetwork:
    def layer(rec):
        return Dense(np.array(rec["weight"], dtype=float), np.array(rec["bias"], dtype=float), rec["activation"])

    return QNetwork(layer(d["embed"]), [layer(r) for r in d["trunk"]],
                    DuelingHead(layer(d["value"]), layer(d["advantage"])))
