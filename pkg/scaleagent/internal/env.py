"""
Episode environment: one raster per episode, one step per grid patch in
row-major order. The action is the context scale; the reward is the patch
score gain over the local-only prediction, plus the map gain on the last step.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import gymnasium as gym
import numpy as np
from gymnasium import spaces

from .exceptions import DimensionError, RolloutError
from .scoring import RewardRecord, map_reward, patch_reward
from .segnet import SegNet
from .tiling import (LabelMask, Raster, build_grid, extract_local_labels, make_position_mask,
                     make_thumbnail, stitch_probabilities)

logger = logging.getLogger(__name__)


class InMemoryScenes:
    """Scene source over ``(raster, labels)`` pairs, mirroring ``Manifest.load``."""

    def __init__(self, scenes: Sequence[Tuple[Raster, Optional[LabelMask]]], ids: Optional[Sequence[str]] = None):
        self.scenes = list(scenes)
        self.ids = list(ids) if ids is not None else [f"scene_{i:04d}" for i in range(len(self.scenes))]

    def __len__(self) -> int:
        return len(self.scenes)

    def load(self, index: int) -> Tuple[Raster, Optional[LabelMask]]:
        return self.scenes[index]

    def scene_id(self, index: int) -> str:
        return self.ids[index]


def scene_id(scenes, index: int) -> str:
    if hasattr(scenes, "scene_id"):
        return scenes.scene_id(index)
    return scenes.entries[index].id


class EpisodeContext:
    """Grid, thumbnail and cached predictions for one raster."""

    def __init__(self, raster: Raster, labels: Optional[LabelMask], patch_hw: Tuple[int, int],
                 thumb_hw: Tuple[int, int], classes: int):
        self.raster = raster
        self.labels = labels
        self.classes = classes
        self.grid = build_grid(raster, *patch_hw)
        self.thumb_hw = tuple(thumb_hw)
        self.thumbnail = make_thumbnail(raster, *thumb_hw)
        self._local: Dict[int, np.ndarray] = {}

    @property
    def T(self) -> int:
        return self.grid.T

    def observation(self, t: int) -> Dict[str, np.ndarray]:
        mask = make_position_mask(self.grid[t], self.raster.shape, self.thumb_hw)
        return {"thumbnail": self.thumbnail.data, "position_mask": mask}

    def local_probs(self, segnet: SegNet, t: int) -> np.ndarray:
        if t not in self._local:
            self._local[t] = segnet.predict_patch(self.raster, self.grid[t], 1).probs
        return self._local[t]

    def predict(self, segnet: SegNet, t: int, a: int, single_branch: bool = False) -> np.ndarray:
        """(K, h, w) probabilities for patch ``t`` at scale ``a``.

        Scale 1 is always the local-only prediction that rewards are measured against.
        """
        if a == 1:
            return self.local_probs(segnet, t)
        if single_branch:
            return segnet.predict_single_branch(self.raster, self.grid[t], a)
        return segnet.predict_patch(self.raster, self.grid[t], a).probs

    def patch_labels(self, t: int) -> LabelMask:
        return extract_local_labels(self.labels, self.grid[t])


class SegmentationEnv(gym.Env):
    """Gymnasium environment over a scene source; actions are ``Discrete(N, start=1)``."""

    metadata = {"render_modes": []}

    def __init__(self, scenes, segnet: SegNet, patch_hw: Tuple[int, int], thumb_hw: Tuple[int, int],
                 actions: int, classes: int, rng: Optional[np.random.Generator] = None,
                 single_branch: bool = False):
        super().__init__()
        if len(scenes) == 0:
            raise RolloutError("Environment needs at least one scene")
        self.scenes = scenes
        self.segnet = segnet
        self.patch_hw = tuple(patch_hw)
        self.thumb_hw = tuple(thumb_hw)
        self.n_actions = actions
        self.classes = classes
        self.single_branch = single_branch
        self.rng = rng if rng is not None else np.random.default_rng(0)
        channels = segnet.config.in_channels
        self.action_space = spaces.Discrete(actions, start=1)
        self.observation_space = spaces.Dict({
            "thumbnail": spaces.Box(-np.inf, np.inf, shape=(channels, *self.thumb_hw), dtype=np.float64),
            "position_mask": spaces.MultiBinary(list(self.thumb_hw)),
        })
        self.order: List[int] = []
        self.cursor = 0
        self.scene_index: Optional[int] = None
        self.context: Optional[EpisodeContext] = None
        self.t = 0
        self.chosen: List[np.ndarray] = []
        self.local: List[np.ndarray] = []
        self.actions_taken: List[int] = []
        self.records: List[RewardRecord] = []
        self.episode_return = 0.0

    @property
    def done(self) -> bool:
        return self.context is None or self.t >= self.context.T

    def _next_scene(self) -> int:
        if self.cursor >= len(self.order):
            self.order = [int(i) for i in self.rng.permutation(len(self.scenes))]
            self.cursor = 0
        index = self.order[self.cursor]
        self.cursor += 1
        return index

    def _load(self, index: int) -> None:
        raster, labels = self.scenes.load(index)
        if labels is None:
            raise RolloutError("Rewards need a labelled scene")
        self.scene_index = index
        self.context = EpisodeContext(raster, labels, self.patch_hw, self.thumb_hw, self.classes)

    def reset(self, *, seed: Optional[int] = None, options: Optional[Dict] = None):
        super().reset(seed=seed)
        if seed is not None:
            self.rng = np.random.default_rng(seed)
            self.order, self.cursor = [], 0
        options = options or {}
        index = options["scene"] if "scene" in options else self._next_scene()
        self._load(int(index))
        self.t = 0
        self.chosen, self.local, self.actions_taken = [], [], []
        self.records = []
        self.episode_return = 0.0
        return self.context.observation(0), {"scene": scene_id(self.scenes, self.scene_index), "T": self.context.T}

    def step(self, action):
        if self.done:
            raise RolloutError("step() called on a finished episode; call reset()")
        a = int(action)
        if not 1 <= a <= self.n_actions:
            raise DimensionError(f"Action {a} outside [1, {self.n_actions}]")
        ctx = self.context
        t = self.t
        probs = ctx.predict(self.segnet, t, a, self.single_branch)
        local = ctx.local_probs(self.segnet, t)
        y = ctx.patch_labels(t)
        reward = patch_reward(y, np.argmax(probs, axis=0), np.argmax(local, axis=0), self.classes)
        self.chosen.append(probs)
        self.local.append(local)
        self.actions_taken.append(a)
        self.t += 1
        terminated = self.t == ctx.T
        bonus = None
        if terminated:
            y_hat = np.argmax(stitch_probabilities(list(zip(ctx.grid, self.chosen)), ctx.raster.shape), axis=0)
            y_loc = np.argmax(stitch_probabilities(list(zip(ctx.grid, self.local)), ctx.raster.shape), axis=0)
            bonus = map_reward(ctx.labels, y_hat, y_loc, ctx.T, self.classes)
        record = RewardRecord(t=t, action=a, reward=reward, map_bonus=bonus)
        self.records.append(record)
        total = record.total
        self.episode_return += total
        obs = ctx.observation(min(self.t, ctx.T - 1))
        info = {"t": t, "action": a, "patch_reward": reward, "map_reward": bonus, "probs": probs, "record": record}
        return obs, total, terminated, False, info

    def stitched(self) -> np.ndarray:
        """Probability map of the finished episode."""
        if not self.done:
            raise RolloutError("Episode is not finished")
        return stitch_probabilities(list(zip(self.context.grid, self.chosen)), self.context.raster.shape)

    def observation(self) -> Dict[str, np.ndarray]:
        return self.context.observation(min(self.t, self.context.T - 1))

    def end_episode(self) -> None:
        """Drop the current episode; the next step needs a reset."""
        self.context = None
        self.scene_index = None
        self.t = 0
        self.chosen, self.local, self.actions_taken = [], [], []
        self.records = []
        self.episode_return = 0.0

    # --- persistence ---

    def state_dict(self) -> Tuple[Dict, Dict[str, np.ndarray]]:
        """JSON-able metadata plus arrays needed to continue an episode mid-way."""
        meta = {
            "order": list(self.order),
            "cursor": self.cursor,
            "scene": self.scene_index,
            "t": self.t,
            "actions": list(self.actions_taken),
            "records": [[r.t, r.action, r.reward, r.map_bonus] for r in self.records],
            "episode_return": self.episode_return,
            "rng": self.rng.bit_generator.state,
        }
        arrays: Dict[str, np.ndarray] = {}
        if self.chosen:
            arrays["env.chosen"] = np.stack(self.chosen)
            arrays["env.local"] = np.stack(self.local)
        return meta, arrays

    def load_state_dict(self, meta: Dict, arrays: Dict[str, np.ndarray]) -> None:
        self.order = list(meta["order"])
        self.cursor = int(meta["cursor"])
        self.rng.bit_generator.state = meta["rng"]
        self.context = None
        self.scene_index = None
        if meta["scene"] is not None:
            self._load(int(meta["scene"]))
        self.t = int(meta["t"])
        self.actions_taken = list(meta["actions"])
        self.records = [RewardRecord(int(t), int(a), float(r), b) for t, a, r, b in meta.get("records", [])]
        self.episode_return = float(meta["episode_return"])
        self.chosen = list(arrays["env.chosen"]) if self.t else []
        self.local = list(arrays["env.local"]) if self.t else []
        for t, probs in enumerate(self.local):
            self.context._local[t] = probs
