"""
Training schedules, run-state persistence and whole-raster mapping.

Three phases share one output directory:

  pretrain  segmenter only, scales drawn uniformly from 1..N
  agent     agent only, segmenter frozen
  joint     alternating ``interval``-step blocks: segmenter (agent frozen,
            actions sampled from it), then agent (segmenter frozen)

Each phase writes its checkpoints, a CSV curve and ``state.json`` /
``state.gack`` so an interrupted run resumes bit-exactly.
"""

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from ..config import RunConfig
from ..logging import AGENT_COLUMNS, PRETRAIN_COLUMNS, CSVLog, RunLogManager
from ..metrics import MetricsCollector
from .baselines import EpisodeResult, Learned, action_map, infer, intensity_table, scale_intensity
from .env import SegmentationEnv
from .exceptions import CheckpointError, DatasetError
from .formats import load_checkpoint, load_json, save_checkpoint, save_json, save_pnm, save_tensor
from .neuralcore import SGD, Module
from .rng import StreamRegistry
from .sca import A2CLearner, ScaleControlAgent, State
from .segnet import SegNet
from .synthgeo import Manifest, load_manifest
from .tiling import Raster, TileGrid, build_grid, make_position_mask, make_thumbnail

logger = logging.getLogger(__name__)

SEGNET_CHECKPOINT = "segnet.gack"
AGENT_CHECKPOINT = "agent.gack"
JOINT_SEGNET_CHECKPOINT = "segnet_joint.gack"
JOINT_AGENT_CHECKPOINT = "agent_joint.gack"
STATE_FILE = "state.json"
STATE_ARRAYS = "state.gack"


@dataclass
class RunState:
    """Everything besides model weights needed to continue a phase."""
    phase: str
    step: int = 0
    streams: Dict = field(default_factory=dict)
    checkpoints: Dict[str, str] = field(default_factory=dict)
    episode_returns: List[float] = field(default_factory=list)
    env: Optional[Dict] = None
    config_digest: str = ""

    def save(self, out_dir: Path, arrays: Dict[str, np.ndarray]) -> None:
        save_checkpoint(out_dir / STATE_ARRAYS, arrays)
        save_json(out_dir / STATE_FILE, asdict(self))

    @classmethod
    def load(cls, out_dir: Path) -> Tuple["RunState", Dict[str, np.ndarray]]:
        path = out_dir / STATE_FILE
        if not path.exists():
            raise CheckpointError(f"No run state to resume in {out_dir}")
        state = cls(**load_json(path))
        return state, load_checkpoint(out_dir / STATE_ARRAYS)


def config_digest(cfg: RunConfig) -> str:
    """Hash of every setting that changes the training trajectory."""
    payload = cfg.model_dump(mode="json", exclude={"out", "workers", "dataset", "test_dataset"})
    return hashlib.sha256(repr(sorted(payload.items())).encode("utf-8")).hexdigest()


def parameter_checksum(module: Module) -> str:
    digest = hashlib.sha256()
    for name, p in sorted(module.named_parameters().items()):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(p.value).tobytes())
    return digest.hexdigest()


def _prefixed(state: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in state.items()}


def _unprefixed(state: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    head = prefix + "/"
    return {k[len(head):]: v for k, v in state.items() if k.startswith(head)}


class SceneCache:
    """Scenes of a manifest with their grids and thumbnails, loaded once."""

    def __init__(self, manifest: Manifest, patch_hw: Tuple[int, int], thumb_hw: Tuple[int, int]):
        self.manifest = manifest
        self.patch_hw = tuple(patch_hw)
        self.thumb_hw = tuple(thumb_hw)
        self._scenes: Dict[int, Tuple[Raster, np.ndarray]] = {}
        self._grids: Dict[int, TileGrid] = {}
        self._thumbs: Dict[int, Raster] = {}

    def __len__(self) -> int:
        return len(self.manifest)

    def load(self, index: int) -> Tuple[Raster, np.ndarray]:
        if index not in self._scenes:
            self._scenes[index] = self.manifest.load(index)
        return self._scenes[index]

    def scene_id(self, index: int) -> str:
        return self.manifest.entries[index].id

    def grid(self, index: int) -> TileGrid:
        if index not in self._grids:
            self._grids[index] = build_grid(self.load(index)[0], *self.patch_hw)
        return self._grids[index]

    def thumbnail(self, index: int) -> Raster:
        if index not in self._thumbs:
            self._thumbs[index] = make_thumbnail(self.load(index)[0], *self.thumb_hw)
        return self._thumbs[index]

    def state(self, index: int, t: int) -> State:
        raster = self.load(index)[0]
        mask = make_position_mask(self.grid(index)[t], raster.shape, self.thumb_hw)
        return State(thumbnail=self.thumbnail(index), position_mask=mask)


def open_scenes(path: Optional[str], cfg: RunConfig) -> SceneCache:
    if not path:
        raise DatasetError("No dataset manifest configured (set 'dataset')")
    manifest = load_manifest(path)
    if len(manifest) == 0:
        raise DatasetError(f"Manifest {path} lists no scenes")
    return SceneCache(manifest, cfg.patch_hw, cfg.thumb_hw)


def build_segnet(cfg: RunConfig, checkpoint: Optional[Path] = None) -> SegNet:
    segnet = SegNet(cfg.segnet, seed=cfg.seed)
    if checkpoint is not None:
        segnet.load_state_dict(load_checkpoint(checkpoint))
    return segnet


def build_agent(cfg: RunConfig, checkpoint: Optional[Path] = None) -> ScaleControlAgent:
    agent = ScaleControlAgent(cfg.agent, seed=cfg.seed)
    if checkpoint is not None:
        agent.load_state_dict(load_checkpoint(checkpoint))
    return agent


def resolve_checkpoint(out_dir: Path, explicit: Optional[str], joint_name: str, base_name: str) -> Path:
    """Explicit path, else the joint checkpoint, else the single-phase one."""
    if explicit:
        return Path(explicit)
    for name in (joint_name, base_name):
        if (out_dir / name).exists():
            return out_dir / name
    raise CheckpointError(f"No {base_name} or {joint_name} in {out_dir}")


class TrainingSession:
    """Shared plumbing of a phase: streams, run state, CSV curves, logging and metrics."""

    def __init__(self, cfg: RunConfig, phase: str, out_dir: Optional[str] = None, resume: bool = False,
                 log: Optional[RunLogManager] = None, metrics: Optional[MetricsCollector] = None):
        self.cfg = cfg
        self.phase = phase
        self.out = Path(out_dir or cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.log = log
        self.metrics = metrics
        self.streams = StreamRegistry(cfg.seed)
        self.state = RunState(phase=phase, config_digest=config_digest(cfg))
        self.arrays: Dict[str, np.ndarray] = {}
        self.resumed = False
        if resume:
            state, arrays = RunState.load(self.out)
            if state.phase != phase:
                raise CheckpointError(f"{self.out / STATE_FILE} belongs to phase '{state.phase}', not '{phase}'")
            if state.config_digest != self.state.config_digest:
                raise CheckpointError("Run configuration changed since the state was saved")
            self.state, self.arrays = state, arrays
            self.streams.load_state_dict(state.streams)
            self.resumed = True
            if log:
                log.log_resume(phase, state.step)
        self.curves: Dict[str, CSVLog] = {}

    def curve(self, name: str, columns) -> CSVLog:
        if name not in self.curves:
            log = CSVLog(self.out / name, columns, append=self.resumed)
            if self.resumed:
                log.truncate_after(self.state.step)
            self.curves[name] = log
        return self.curves[name]

    def begin(self, total: int) -> None:
        if self.log:
            self.log.log_phase_start(self.phase, total, {"seed": self.cfg.seed, "from_step": self.state.step})
        if self.metrics:
            self.metrics.start_phase(self.phase)

    def progress(self, step: int, values: Dict[str, float]) -> None:
        if self.log and (step % self.cfg.log_every == 0):
            self.log.log_progress(self.phase, step, values)
        if self.metrics and (step % self.cfg.log_every == 0):
            self.metrics.sample(self.phase)

    def save(self, checkpoints: Dict[str, Module], optimizers: Dict[str, SGD],
             env: Optional[SegmentationEnv] = None) -> None:
        arrays: Dict[str, np.ndarray] = {}
        for name, module in checkpoints.items():
            save_checkpoint(self.out / name, module.state_dict())
            self.state.checkpoints[module.name] = name
            if self.log:
                self.log.log_checkpoint(str(self.out / name), self.state.step)
        for prefix, optimizer in optimizers.items():
            arrays.update(_prefixed(optimizer.state_dict(), prefix))
        self.state.env = None
        if env is not None:
            meta, env_arrays = env.state_dict()
            self.state.env = meta
            arrays.update(env_arrays)
        self.state.streams = self.streams.state_dict()
        self.state.save(self.out, arrays)

    def restore_optimizer(self, prefix: str, optimizer: SGD) -> None:
        if self.resumed:
            optimizer.load_state_dict(_unprefixed(self.arrays, prefix))

    def restore_env(self, env: SegmentationEnv) -> None:
        if self.resumed and self.state.env is not None:
            env.load_state_dict(self.state.env, self.arrays)

    def end(self, steps: int, final: Optional[float]) -> None:
        for curve in self.curves.values():
            curve.close()
        if self.metrics:
            self.metrics.complete_phase(self.phase, steps=steps, final_value=final)
        if self.log:
            duration = 0.0
            if self.metrics and self.metrics.phase_metrics:
                duration = self.metrics.phase_metrics[-1].duration or 0.0
            self.log.log_phase_complete(self.phase, steps, duration, final)

    def should_checkpoint(self, step: int) -> bool:
        every = self.cfg.checkpoint_every
        return bool(every) and step % every == 0


def segmenter_step(segnet: SegNet, optimizer: SGD, scenes: SceneCache, rng: np.random.Generator,
                   batch_size: int, choose: Callable[[int, int], int]) -> Tuple[float, float]:
    """One SGD step over ``batch_size`` random patches; returns (mean loss, lr)."""
    optimizer.zero_grad()
    total = 0.0
    for _ in range(batch_size):
        index = int(rng.integers(len(scenes)))
        raster, labels = scenes.load(index)
        grid = scenes.grid(index)
        t = int(rng.integers(grid.T))
        a = choose(index, t)
        total += segnet.training_step(raster, labels, grid[t], a).total
    if batch_size > 1:
        for p in optimizer.params:
            p.grad /= batch_size
    lr = optimizer.config.lr_at(optimizer.step_count)
    optimizer.step()
    return total / batch_size, lr


def agent_step(learner: A2CLearner, env: SegmentationEnv, rng: np.random.Generator):
    """Collect one n-step segment and update; returns (loss, finished episode return or None)."""
    obs = env.reset()[0] if env.done else env.observation()
    segment, _, bootstrap = learner.collect(env, obs, rng)
    loss = learner.update(segment, bootstrap)
    return loss, (env.episode_return if segment[-1].done else None)


def _mean_recent(returns: List[float], window: int) -> float:
    recent = returns[-window:]
    return float(np.mean(recent)) if recent else math.nan


def _end_step(total: int, start: int, stop_after: Optional[int]) -> int:
    end = total if stop_after is None else min(total, stop_after)
    return max(start, end)


def pretrain_segmenter(cfg: RunConfig, out_dir: Optional[str] = None, resume: bool = False,
                       stop_after: Optional[int] = None, log: Optional[RunLogManager] = None,
                       metrics: Optional[MetricsCollector] = None) -> Path:
    session = TrainingSession(cfg, "pretrain", out_dir, resume, log, metrics)
    scenes = open_scenes(cfg.dataset, cfg)
    segnet = build_segnet(cfg, session.out / SEGNET_CHECKPOINT if session.resumed else None)
    optimizer = SGD(segnet.parameters(), cfg.optimizer)
    session.restore_optimizer("optim.seg", optimizer)
    rng = session.streams.get("pretrain.sample")
    n = cfg.agent.actions
    curve = session.curve("pretrain.csv", PRETRAIN_COLUMNS)
    end = _end_step(cfg.pretrain_steps, session.state.step, stop_after)
    session.begin(cfg.pretrain_steps)
    loss = math.nan
    for step in range(session.state.step, end):
        loss, lr = segmenter_step(segnet, optimizer, scenes, rng, cfg.batch_size,
                                  lambda index, t: int(rng.integers(1, n + 1)))
        curve.write(step + 1, loss, lr)
        session.state.step = step + 1
        session.progress(step + 1, {"loss": loss})
        if session.should_checkpoint(step + 1) and step + 1 < end:
            session.save({SEGNET_CHECKPOINT: segnet}, {"optim.seg": optimizer})
    session.save({SEGNET_CHECKPOINT: segnet}, {"optim.seg": optimizer})
    session.end(end, loss)
    return session.out / SEGNET_CHECKPOINT


def train_agent(cfg: RunConfig, out_dir: Optional[str] = None, resume: bool = False,
                stop_after: Optional[int] = None, segnet_checkpoint: Optional[str] = None,
                log: Optional[RunLogManager] = None, metrics: Optional[MetricsCollector] = None) -> Path:
    session = TrainingSession(cfg, "agent", out_dir, resume, log, metrics)
    scenes = open_scenes(cfg.dataset, cfg)
    segnet = build_segnet(cfg, Path(segnet_checkpoint) if segnet_checkpoint else session.out / SEGNET_CHECKPOINT)
    frozen = parameter_checksum(segnet)
    agent = build_agent(cfg, session.out / AGENT_CHECKPOINT if session.resumed else None)
    optimizer = SGD(agent.parameters(), cfg.agent_optimizer)
    session.restore_optimizer("optim.sca", optimizer)
    learner = A2CLearner(agent, optimizer)
    env = SegmentationEnv(scenes, segnet, cfg.patch_hw, cfg.thumb_hw, cfg.agent.actions, cfg.segnet.classes,
                          rng=session.streams.get("env.scenes"))
    session.restore_env(env)
    rng = session.streams.get("sca.actions")
    curve = session.curve("agent.csv", AGENT_COLUMNS)
    end = _end_step(cfg.agent_steps, session.state.step, stop_after)
    session.begin(cfg.agent_steps)
    returns = session.state.episode_returns
    for step in range(session.state.step, end):
        loss, finished = agent_step(learner, env, rng)
        if finished is not None:
            returns.append(finished)
        mean_reward = _mean_recent(returns, cfg.reward_window)
        curve.write(step + 1, mean_reward, loss.policy, loss.value, loss.entropy)
        session.state.step = step + 1
        session.progress(step + 1, {"mean_episode_reward": mean_reward, "L_policy": loss.policy})
        if session.should_checkpoint(step + 1) and step + 1 < end:
            session.save({AGENT_CHECKPOINT: agent}, {"optim.sca": optimizer}, env)
    if parameter_checksum(segnet) != frozen:
        raise CheckpointError("Frozen segmenter parameters changed during agent training")
    session.save({AGENT_CHECKPOINT: agent}, {"optim.sca": optimizer}, env)
    session.end(end, _mean_recent(returns, cfg.reward_window))
    return session.out / AGENT_CHECKPOINT


def joint_block(step: int, interval: int) -> str:
    """``segmenter`` for even blocks of ``interval`` steps, ``agent`` for odd ones."""
    return "segmenter" if (step // interval) % 2 == 0 else "agent"


def train_joint(cfg: RunConfig, out_dir: Optional[str] = None, resume: bool = False,
                stop_after: Optional[int] = None, segnet_checkpoint: Optional[str] = None,
                agent_checkpoint: Optional[str] = None, log: Optional[RunLogManager] = None,
                metrics: Optional[MetricsCollector] = None) -> Tuple[Path, Path]:
    session = TrainingSession(cfg, "joint", out_dir, resume, log, metrics)
    out = session.out
    scenes = open_scenes(cfg.dataset, cfg)
    if session.resumed:
        segnet = build_segnet(cfg, out / JOINT_SEGNET_CHECKPOINT)
        agent = build_agent(cfg, out / JOINT_AGENT_CHECKPOINT)
    else:
        segnet = build_segnet(cfg, Path(segnet_checkpoint) if segnet_checkpoint else out / SEGNET_CHECKPOINT)
        agent = build_agent(cfg, Path(agent_checkpoint) if agent_checkpoint else out / AGENT_CHECKPOINT)
    seg_optimizer = SGD(segnet.parameters(), cfg.optimizer)
    agent_optimizer = SGD(agent.parameters(), cfg.agent_optimizer)
    session.restore_optimizer("optim.seg", seg_optimizer)
    session.restore_optimizer("optim.sca", agent_optimizer)
    learner = A2CLearner(agent, agent_optimizer)
    env = SegmentationEnv(scenes, segnet, cfg.patch_hw, cfg.thumb_hw, cfg.agent.actions, cfg.segnet.classes,
                          rng=session.streams.get("env.scenes"))
    session.restore_env(env)
    sample_rng = session.streams.get("joint.sample")
    seg_action_rng = session.streams.get("joint.seg_actions")
    action_rng = session.streams.get("sca.actions")
    seg_curve = session.curve("joint_segnet.csv", PRETRAIN_COLUMNS)
    agent_curve = session.curve("joint.csv", AGENT_COLUMNS)
    returns = session.state.episode_returns

    def sample_scale(index: int, t: int) -> int:
        action, _, _ = agent.act(scenes.state(index, t), "sample", seg_action_rng)
        return action

    checkpoints = {JOINT_SEGNET_CHECKPOINT: segnet, JOINT_AGENT_CHECKPOINT: agent}
    optimizers = {"optim.seg": seg_optimizer, "optim.sca": agent_optimizer}
    end = _end_step(cfg.joint_steps, session.state.step, stop_after)
    session.begin(cfg.joint_steps)
    final = math.nan
    for step in range(session.state.step, end):
        if joint_block(step, cfg.interval) == "segmenter":
            loss, lr = segmenter_step(segnet, seg_optimizer, scenes, sample_rng, cfg.batch_size, sample_scale)
            seg_curve.write(step + 1, loss, lr)
            session.progress(step + 1, {"loss": loss})
        else:
            if step % cfg.interval == 0:
                # segmenter weights changed; cached local predictions are stale
                env.end_episode()
            a2c, finished = agent_step(learner, env, action_rng)
            if finished is not None:
                returns.append(finished)
            final = _mean_recent(returns, cfg.reward_window)
            agent_curve.write(step + 1, final, a2c.policy, a2c.value, a2c.entropy)
            session.progress(step + 1, {"mean_episode_reward": final, "L_policy": a2c.policy})
        session.state.step = step + 1
        if session.should_checkpoint(step + 1) and step + 1 < end:
            session.save(checkpoints, optimizers, env)
    session.save(checkpoints, optimizers, env)
    session.end(end, final)
    return out / JOINT_SEGNET_CHECKPOINT, out / JOINT_AGENT_CHECKPOINT


@dataclass
class MapResult:
    labels: np.ndarray
    actions: Raster
    probs: np.ndarray
    episode: EpisodeResult = field(repr=False)


def map_image(cfg: RunConfig, segnet: SegNet, agent: ScaleControlAgent, raster: Raster,
              out_dir: Optional[str] = None, name: str = "map") -> MapResult:
    """Greedy agent over the grid; writes the label map, probabilities and action map when ``out_dir`` is set."""
    result = infer(Learned(agent), segnet, raster, cfg.patch_hw, cfg.thumb_hw, cfg.segnet.classes)
    labels = result.labels
    actions = action_map(result, raster.shape)
    if out_dir is not None:
        write_map_outputs(Path(out_dir), name, labels, result.probs, actions, cfg.segnet.classes, cfg.agent.actions)
    return MapResult(labels=labels, actions=actions, probs=result.probs, episode=result)


def label_image(labels: np.ndarray, classes: int) -> np.ndarray:
    return np.rint(labels.astype(np.float64) * 255.0 / (classes - 1)).astype(np.uint8)


def write_intensity_table(path: Path, actions: int) -> None:
    lines = ["scale\tintensity"] + [f"{a}\t{level}" for a, level in intensity_table(actions)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_action_map(out_dir: Path, name: str, actions: Raster, n_actions: int) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{name}.actions.pgm"
    save_pnm(path, scale_intensity(actions.data[0], n_actions))
    write_intensity_table(out_dir / f"{name}.actions.txt", n_actions)
    return path


def write_map_outputs(out_dir: Path, name: str, labels: np.ndarray, probs: np.ndarray, actions: Raster,
                      classes: int, n_actions: int) -> Dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "labels": out_dir / f"{name}.labels.gatn",
        "labels_pgm": out_dir / f"{name}.labels.pgm",
        "probs": out_dir / f"{name}.probs.gatn",
    }
    save_tensor(paths["labels"], labels.astype(np.uint8))
    save_pnm(paths["labels_pgm"], label_image(labels, classes))
    save_tensor(paths["probs"], probs)
    paths["actions"] = write_action_map(out_dir, name, actions, n_actions)
    return paths
