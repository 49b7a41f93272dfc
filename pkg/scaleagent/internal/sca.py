"""
Scale Control Agent: an actor-critic network that picks the context scale for
each patch from a global thumbnail and the patch's position mask.

The thumbnail feature map goes through a 3x3 index window and is then
indexed by the position mask: everything outside the patch footprint is
dropped and the footprint alone is average-pooled, so states at different
positions of one raster are distinguishable. Learning is advantage
actor-critic on n-step segments.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from .exceptions import GeometryError, RolloutError, ShapeError
from .neuralcore import (SGD, Conv2d, Dense, Module, global_avg_pool, global_avg_pool_backward,
                         log_softmax, relu, relu_backward)
from .tiling import Raster, area_matrix

logger = logging.getLogger(__name__)


class AgentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    actions: int = 6
    gamma: float = 0.99
    n_steps: int = 5
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    in_channels: int = 3
    widths: List[int] = [16, 32, 64]
    index_channels: int = 64
    feature_indexing: bool = True
    actor_gain: float = 0.01

    @field_validator("actions")
    @classmethod
    def validate_actions(cls, v):
        if v < 2:
            raise ValueError("actions (N) must be >= 2")
        return v

    @field_validator("gamma")
    @classmethod
    def validate_gamma(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        return v

    @field_validator("n_steps", "index_channels")
    @classmethod
    def validate_positive(cls, v):
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("value_coef", "entropy_coef")
    @classmethod
    def validate_coef(cls, v):
        if v < 0:
            raise ValueError("loss coefficients must be >= 0")
        return v

    @field_validator("widths")
    @classmethod
    def validate_widths(cls, v):
        if not v or any(w <= 0 for w in v):
            raise ValueError("widths must be a non-empty list of positive ints")
        return v


@dataclass
class State:
    """Thumbnail of the whole raster plus the current patch's footprint on it."""
    thumbnail: Raster
    position_mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.position_mask)
        if mask.shape != self.thumbnail.shape:
            raise ShapeError(f"Position mask {mask.shape} does not match thumbnail {self.thumbnail.shape}")
        if not mask.any():
            raise GeometryError("Position mask is empty")
        self.position_mask = (mask != 0).astype(np.uint8)

    @classmethod
    def from_observation(cls, obs: Dict[str, np.ndarray]) -> "State":
        return cls(thumbnail=Raster(obs["thumbnail"]), position_mask=obs["position_mask"])


@dataclass
class Transition:
    state: State
    action: int
    reward: float
    value: float
    log_probs: np.ndarray
    done: bool
    info: Dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not (np.isfinite(self.reward) and np.isfinite(self.value) and np.all(np.isfinite(self.log_probs))):
            raise RolloutError(f"Non-finite transition at action {self.action}")

    @property
    def log_prob(self) -> float:
        return float(self.log_probs[self.action - 1])


@dataclass
class AgentOutput:
    logits: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    features: np.ndarray
    cache: Dict = field(default_factory=dict, repr=False)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)


@dataclass
class A2CLoss:
    policy: float
    value: float
    entropy: float
    total: float
    advantages: np.ndarray
    dlogits: np.ndarray = field(repr=False)
    dvalues: np.ndarray = field(repr=False)


def downsample_mask(mask: np.ndarray, out_hw: Tuple[int, int]) -> np.ndarray:
    """Any-overlap reduction of a binary mask onto a coarser grid."""
    ah = area_matrix(mask.shape[0], out_hw[0])
    aw = area_matrix(mask.shape[1], out_hw[1])
    return ((ah @ mask.astype(np.float64) @ aw.T) > 0).astype(np.float64)


class ScaleControlAgent(Module):
    """Actor-critic over scales ``1..N``; parameters are prefixed ``sca.``."""

    def __init__(self, config: AgentConfig, seed: int = 0):
        super().__init__("sca")
        self.config = config
        c_in = config.in_channels + (0 if config.feature_indexing else 1)
        channels = [c_in] + list(config.widths)
        self.encoder = [
            self.add_module(Conv2d(f"sca.enc{i}", channels[i], channels[i + 1], 3, stride=2, padding=1, seed=seed))
            for i in range(len(config.widths))
        ]
        self.index = self.add_module(Conv2d("sca.index", config.widths[-1], config.index_channels, 3,
                                            padding=1, seed=seed))
        self.actor = self.add_module(Dense("sca.actor", config.index_channels, config.actions, seed=seed,
                                           gain=config.actor_gain))
        self.critic = self.add_module(Dense("sca.critic", config.index_channels, 1, seed=seed))

    @property
    def actions(self) -> int:
        return self.config.actions

    def forward(self, states: Sequence[State]) -> AgentOutput:
        x = np.stack([s.thumbnail.data for s in states])
        masks = np.stack([s.position_mask for s in states]).astype(np.float64)
        if not self.config.feature_indexing:
            x = np.concatenate([x, masks[:, None]], axis=1)
        caches = []
        f = x
        for conv in self.encoder:
            f, conv_cache = conv.forward(f)
            f, relu_mask = relu(f)
            caches.append((conv_cache, relu_mask))
        pool_mask = None
        if self.config.feature_indexing:
            pool_mask = np.stack([downsample_mask(m, f.shape[-2:]) for m in masks])
            if np.any(pool_mask.sum(axis=(1, 2)) == 0):
                raise GeometryError("Position mask vanished at feature resolution")
        # the window sees the footprint's neighbours; only the footprint is pooled
        g, index_cache = self.index.forward(f)
        g, index_relu = relu(g)
        pooled, pool_cache = global_avg_pool(g, pool_mask)
        logits, actor_cache = self.actor.forward(pooled)
        values, critic_cache = self.critic.forward(pooled)
        return AgentOutput(
            logits=logits,
            log_probs=log_softmax(logits, axis=1),
            values=values[:, 0],
            features=pooled,
            cache={"enc": caches, "index": index_cache, "index_relu": index_relu,
                   "pool": pool_cache, "actor": actor_cache, "critic": critic_cache},
        )

    def backward(self, out: AgentOutput, dlogits: np.ndarray, dvalues: np.ndarray) -> None:
        cache = out.cache
        dpooled = self.actor.backward(dlogits, cache["actor"]) + self.critic.backward(dvalues[:, None], cache["critic"])
        dg = relu_backward(global_avg_pool_backward(dpooled, cache["pool"]), cache["index_relu"])
        df = self.index.backward(dg, cache["index"])
        for conv, (conv_cache, relu_mask) in zip(reversed(self.encoder), reversed(cache["enc"])):
            df = conv.backward(relu_backward(df, relu_mask), conv_cache)

    def encode_state(self, state: State) -> np.ndarray:
        return self.forward([state]).features[0]

    def actor_critic(self, state: State) -> Tuple[np.ndarray, float]:
        out = self.forward([state])
        return out.probs[0], float(out.values[0])

    def act(self, state: State, mode: str = "sample",
            rng: Optional[np.random.Generator] = None) -> Tuple[int, np.ndarray, float]:
        """Pick a scale in ``1..N``; returns (action, log-probs, value)."""
        out = self.forward([state])
        log_probs = out.log_probs[0]
        if mode == "greedy":
            index = int(np.argmax(log_probs))
        elif mode == "sample":
            if rng is None:
                raise RolloutError("Sampling requires a random stream")
            index = int(rng.choice(self.actions, p=np.exp(log_probs)))
        else:
            raise RolloutError(f"Unknown rollout mode: {mode}")
        return index + 1, log_probs, float(out.values[0])

    def value(self, state: State) -> float:
        return float(self.forward([state]).values[0])


def td_targets(transitions: Sequence[Transition], gamma: float, n: int, bootstrap: float = 0.0) -> np.ndarray:
    """n-step returns, bootstrapping from the next stored value or ``bootstrap`` at the segment end."""
    if not transitions:
        raise RolloutError("Cannot compute targets for an empty segment")
    rewards = [t.reward for t in transitions]
    values = [t.value for t in transitions]
    dones = [t.done for t in transitions]
    length = len(transitions)
    targets = np.empty(length)
    for t in range(length):
        m = min(n, length - t)
        g = 0.0
        discount = 1.0
        ended = False
        for k in range(m):
            g += discount * rewards[t + k]
            discount *= gamma
            if dones[t + k]:
                ended = True
                break
        if not ended:
            nxt = t + m
            g += discount * (values[nxt] if nxt < length else bootstrap)
        targets[t] = g
    return targets


def a2c_terms(log_probs: np.ndarray, values: np.ndarray, actions: Sequence[int], targets: np.ndarray,
              value_coef: float = 0.5, entropy_coef: float = 0.0) -> A2CLoss:
    """Losses and their gradients w.r.t. logits and values.

    The advantage ``target - value`` is a constant for the actor.
    """
    batch = len(actions)
    if log_probs.shape[0] != batch or values.shape[0] != batch or targets.shape[0] != batch:
        raise RolloutError("Targets are not aligned with transitions")
    idx = np.asarray(actions, dtype=np.int64) - 1
    rows = np.arange(batch)
    probs = np.exp(log_probs)
    advantages = targets - values
    chosen = log_probs[rows, idx]
    policy = float(np.mean(-advantages * chosen))
    value = float(np.mean((values - targets) ** 2))
    per_entropy = -(probs * log_probs).sum(axis=1)
    entropy = float(per_entropy.mean())

    onehot = np.zeros_like(probs)
    onehot[rows, idx] = 1.0
    dlogits = -(advantages[:, None] * (onehot - probs)) / batch
    if entropy_coef:
        dentropy = -probs * (log_probs + per_entropy[:, None]) / batch
        dlogits = dlogits - entropy_coef * dentropy
    dvalues = value_coef * 2.0 * (values - targets) / batch
    return A2CLoss(policy=policy, value=value, entropy=entropy,
                   total=policy + value_coef * value - entropy_coef * entropy,
                   advantages=advantages, dlogits=dlogits, dvalues=dvalues)


def a2c_losses(transitions: Sequence[Transition], targets: np.ndarray,
               value_coef: float = 0.5, entropy_coef: float = 0.0) -> A2CLoss:
    log_probs = np.stack([t.log_probs for t in transitions])
    values = np.array([t.value for t in transitions])
    return a2c_terms(log_probs, values, [t.action for t in transitions], np.asarray(targets, dtype=np.float64),
                     value_coef, entropy_coef)


def rollout(env, agent: ScaleControlAgent, mode: str = "sample", rng: Optional[np.random.Generator] = None,
            options: Optional[Dict] = None) -> List[Transition]:
    """Play one full episode; the final transition carries the map bonus."""
    obs, _ = env.reset(options=options)
    trajectory: List[Transition] = []
    done = False
    while not done:
        state = State.from_observation(obs)
        action, log_probs, value = agent.act(state, mode, rng)
        obs, reward, done, _, info = env.step(action)
        trajectory.append(Transition(state=state, action=action, reward=float(reward), value=value,
                                     log_probs=log_probs, done=bool(done), info=info))
    return trajectory


class A2CLearner:
    """Applies one advantage actor-critic update per n-step segment."""

    def __init__(self, agent: ScaleControlAgent, optimizer: SGD):
        self.agent = agent
        self.optimizer = optimizer

    @property
    def config(self) -> AgentConfig:
        return self.agent.config

    def update(self, transitions: Sequence[Transition], bootstrap: float = 0.0) -> A2CLoss:
        targets = td_targets(transitions, self.config.gamma, self.config.n_steps, bootstrap)
        out = self.agent.forward([t.state for t in transitions])
        loss = a2c_terms(out.log_probs, out.values, [t.action for t in transitions], targets,
                         self.config.value_coef, self.config.entropy_coef)
        self.optimizer.zero_grad()
        self.agent.backward(out, loss.dlogits, loss.dvalues)
        self.optimizer.step()
        return loss

    def collect(self, env, obs: Dict[str, np.ndarray], rng: np.random.Generator):
        """Up to ``n_steps`` sampled transitions from ``obs``; stops at episode end.

        Returns the segment, the next observation and the bootstrap value.
        """
        segment: List[Transition] = []
        for _ in range(self.config.n_steps):
            state = State.from_observation(obs)
            action, log_probs, value = self.agent.act(state, "sample", rng)
            obs, reward, done, _, info = env.step(action)
            segment.append(Transition(state=state, action=action, reward=float(reward), value=value,
                                      log_probs=log_probs, done=bool(done), info=info))
            if done:
                return segment, obs, 0.0
        return segment, obs, self.agent.value(State.from_observation(obs))
