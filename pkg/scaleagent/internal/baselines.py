"""
Scale-selection policies evaluated under one harness.

Every policy sees the same grids and segmenter weights; only the action
sequence differs. ``evaluate_policy`` scores the stitched maps and the episode
rewards, ``infer`` maps an unlabelled raster and ``export_action_map`` paints
the selected scales.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .env import EpisodeContext, SegmentationEnv
from .exceptions import DatasetError, DimensionError
from .rng import named_stream
from .sca import ScaleControlAgent, State
from .scoring import confusion, mf1, miou, patch_reward
from .segnet import SegNet
from .tiling import Raster, TileGrid, paint_patches, stitch_probabilities

logger = logging.getLogger(__name__)

RANDOM_SEEDS = (0, 1, 2, 3, 4)


class Policy:
    """Maps (episode, step, state) to a scale in ``1..N``."""

    name = "policy"
    single_branch = False
    stochastic = False

    def reset(self, seed: int) -> None:
        pass

    def choose(self, ctx: EpisodeContext, t: int, state: State, segnet: SegNet) -> int:
        raise NotImplementedError


class LocalOnly(Policy):
    name = "local_only"

    def choose(self, ctx, t, state, segnet) -> int:
        return 1


class FixedScale(Policy):
    def __init__(self, scale: int):
        if scale < 2:
            raise DimensionError(f"Fixed scale must be >= 2, got {scale}")
        self.scale = scale
        self.name = f"fixed_{scale}"

    def choose(self, ctx, t, state, segnet) -> int:
        return self.scale


class ContextOnly(FixedScale):
    """Downsampled context patch through the context branch alone."""
    single_branch = True

    def __init__(self, scale: int):
        super().__init__(scale)
        self.name = f"context_only_{scale}"


class RandomScale(Policy):
    name = "random"
    stochastic = True

    def __init__(self, actions: int, seed: int = 0):
        self.actions = actions
        self.reset(seed)

    def reset(self, seed: int) -> None:
        self.seed = seed
        self.rng = named_stream(seed, "baselines.random")

    def choose(self, ctx, t, state, segnet) -> int:
        return int(self.rng.integers(1, self.actions + 1))


class Learned(Policy):
    """Greedy agent with the dual-branch segmenter."""
    name = "learned"

    def __init__(self, agent: ScaleControlAgent):
        self.agent = agent

    def choose(self, ctx, t, state, segnet) -> int:
        action, _, _ = self.agent.act(state, "greedy")
        return action


class SingleBranch(Learned):
    """Agent-selected scale fed to one branch only."""
    name = "single_branch"
    single_branch = True


class OracleScale(Policy):
    """Per patch, the scale with the largest patch reward; ties go to the smaller scale."""
    name = "oracle"

    def __init__(self, actions: int):
        self.actions = actions

    def choose(self, ctx, t, state, segnet) -> int:
        if ctx.labels is None:
            raise DatasetError("OracleScale needs labelled scenes")
        y = ctx.patch_labels(t)
        local = np.argmax(ctx.local_probs(segnet, t), axis=0)
        best, best_reward = 1, 0.0
        for a in range(2, self.actions + 1):
            pred = np.argmax(ctx.predict(segnet, t, a), axis=0)
            reward = patch_reward(y, pred, local, ctx.classes)
            if reward > best_reward:
                best, best_reward = a, reward
        return best


def build_policy(name: str, actions: int, agent: Optional[ScaleControlAgent] = None) -> Policy:
    """Resolve ``local_only``, ``fixed_<a>``, ``context_only_<a>``, ``random``,
    ``learned``, ``single_branch`` or ``oracle``."""
    if name == "local_only":
        return LocalOnly()
    if name == "random":
        return RandomScale(actions)
    if name == "oracle":
        return OracleScale(actions)
    if name in ("learned", "single_branch"):
        if agent is None:
            raise DatasetError(f"Policy {name} needs a trained agent checkpoint")
        return Learned(agent) if name == "learned" else SingleBranch(agent)
    for prefix, cls in (("fixed_", FixedScale), ("context_only_", ContextOnly)):
        if name.startswith(prefix):
            scale = int(name[len(prefix):])
            if scale > actions:
                raise DimensionError(f"Scale {scale} exceeds N={actions}")
            return cls(scale)
    raise DatasetError(f"Unknown policy: {name}")


@dataclass
class EpisodeResult:
    scene: str
    actions: List[int]
    probs: np.ndarray
    reward: float = 0.0
    patch_rewards: List[float] = field(default_factory=list)
    grid: Optional[TileGrid] = field(default=None, repr=False)

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.probs, axis=0).astype(np.int64)


@dataclass
class PolicyReport:
    """Per-scene rows (one block per random seed) and per-run aggregates."""
    policy: str
    scenes: pd.DataFrame
    runs: pd.DataFrame

    METRICS = ("miou", "mf1", "score", "reward")

    def summary(self) -> Dict[str, float]:
        out: Dict[str, float] = {"policy": self.policy, "runs": int(len(self.runs))}
        for metric in self.METRICS:
            out[metric] = float(self.runs[metric].mean())
            out[f"{metric}_std"] = float(self.runs[metric].std(ddof=1)) if len(self.runs) > 1 else 0.0
        return out


def run_episode(policy: Policy, env: SegmentationEnv, scene: int) -> EpisodeResult:
    obs, info = env.reset(options={"scene": scene})
    done = False
    while not done:
        state = State.from_observation(obs)
        action = policy.choose(env.context, env.t, state, env.segnet)
        obs, _, done, _, _ = env.step(action)
    return EpisodeResult(scene=info["scene"], actions=list(env.actions_taken), probs=env.stitched(),
                         reward=env.episode_return, patch_rewards=[r.reward for r in env.records],
                         grid=env.context.grid)


def evaluate_policy(policy: Policy, scenes, segnet: SegNet, patch_hw: Tuple[int, int],
                    thumb_hw: Tuple[int, int], actions: int, classes: int,
                    seeds: Sequence[int] = RANDOM_SEEDS) -> PolicyReport:
    """Greedy episodes over every scene; stochastic policies repeat once per seed."""
    run_seeds = list(seeds) if policy.stochastic else [None]
    env = SegmentationEnv(scenes, segnet, patch_hw, thumb_hw, actions, classes, single_branch=policy.single_branch)
    rows = []
    for run, seed in enumerate(run_seeds):
        if seed is not None:
            policy.reset(seed)
        for index in range(len(scenes)):
            result = run_episode(policy, env, index)
            cm = confusion(env.context.labels, result.labels, classes)
            rows.append({
                "run": run,
                "seed": seed if seed is not None else -1,
                "scene": result.scene,
                "miou": miou(cm),
                "mf1": mf1(cm),
                "score": miou(cm) + mf1(cm),
                "reward": result.reward,
                "mean_patch_reward": float(np.mean(result.patch_rewards)),
                "mean_scale": float(np.mean(result.actions)),
            })
        logger.debug("%s run %d done over %d scenes", policy.name, run, len(scenes))
    frame = pd.DataFrame(rows)
    runs = frame.groupby("run", sort=True)[["miou", "mf1", "score", "reward", "mean_patch_reward"]].mean()
    return PolicyReport(policy=policy.name, scenes=frame, runs=runs.reset_index())


def infer(policy: Policy, segnet: SegNet, raster: Raster, patch_hw: Tuple[int, int], thumb_hw: Tuple[int, int],
          classes: int, labels: Optional[np.ndarray] = None, scene: str = "") -> EpisodeResult:
    """Map a raster without rewards: choose, predict and stitch each patch in grid order."""
    ctx = EpisodeContext(raster, labels, patch_hw, thumb_hw, classes)
    chosen: List[np.ndarray] = []
    actions: List[int] = []
    for t in range(ctx.T):
        state = State.from_observation(ctx.observation(t))
        a = policy.choose(ctx, t, state, segnet)
        actions.append(a)
        chosen.append(ctx.predict(segnet, t, a, policy.single_branch))
    probs = stitch_probabilities(list(zip(ctx.grid, chosen)), raster.shape)
    return EpisodeResult(scene=scene, actions=actions, probs=probs, grid=ctx.grid)


def action_map(result: EpisodeResult, raster_hw: Tuple[int, int]) -> Raster:
    """Selected scale painted over each patch footprint."""
    painted = paint_patches(list(zip(result.grid, result.actions)), raster_hw)
    return Raster(painted.astype(np.float64))


def export_action_map(policy: Policy, segnet: SegNet, raster: Raster, patch_hw: Tuple[int, int],
                      thumb_hw: Tuple[int, int], classes: int,
                      labels: Optional[np.ndarray] = None) -> Raster:
    result = infer(policy, segnet, raster, patch_hw, thumb_hw, classes, labels)
    return action_map(result, raster.shape)


def scale_intensity(a: np.ndarray, actions: int) -> np.ndarray:
    """Grayscale level for each scale: round(255 * a / N)."""
    return np.rint(255.0 * np.asarray(a, dtype=np.float64) / actions).astype(np.uint8)


def intensity_table(actions: int) -> List[Tuple[int, int]]:
    return [(a, int(scale_intensity(np.array([a]), actions)[0])) for a in range(1, actions + 1)]
