"""Root command for ScaleAgent."""

import argparse
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd
from rich.console import Console
from rich.table import Table

from ..config import ConfigError, RunConfig, ScaleAgentConfig
from ..internal.baselines import action_map, build_policy, evaluate_policy, infer
from ..internal.exceptions import CheckpointError, DatasetError, ScaleAgentError, ShapeError
from ..internal.formats import load_array
from ..internal.gradcheck import TOLERANCE, run_grad_checks
from ..internal.scoring import confusion, mf1, miou
from ..internal.synthgeo import generate_dataset, load_manifest, split_seed
from ..internal.tiling import Raster
from ..internal.training import (AGENT_CHECKPOINT, JOINT_AGENT_CHECKPOINT, JOINT_SEGNET_CHECKPOINT,
                                 SEGNET_CHECKPOINT, build_agent, build_segnet, map_image, open_scenes,
                                 pretrain_segmenter, resolve_checkpoint, train_agent, train_joint,
                                 write_action_map)
from ..logging import RunLogManager
from ..metrics import MetricsCollector
from ..reporting import ReportGenerator, render_table

COMMANDS = ["generate-data", "pretrain", "train-agent", "train-joint", "map", "eval", "ablate",
            "export-action-map", "grad-check"]


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        type=str,
        default=None,
        help="Path to a key = value or YAML config file (default: $SCALEAGENT_CONFIG)",
    )
    common.add_argument(
        "--seed",
        type=int,
        default=None,
        help="Master seed (u64); overrides the config",
    )
    common.add_argument(
        "--out",
        type=str,
        default=None,
        help="Output directory; overrides the config",
    )
    common.add_argument(
        "--debug",
        action="store_true",
        help="Verbose logging and full tracebacks",
    )
    common.add_argument(
        "--quiet",
        action="store_true",
        help="No console log output",
    )
    return common


def _training_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--dataset", type=str, help="Training manifest (default: <out>/train/manifest.tsv)")
    parser.add_argument("--resume", action="store_true", help="Continue from <out>/state.json")
    parser.add_argument("--stop-after", type=int, default=None,
                        help="Stop after this global step (the run can be resumed later)")


def _model_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--segnet", type=str, help="Segmenter checkpoint (default: newest in <out>)")
    parser.add_argument("--agent", type=str, help="Agent checkpoint (default: newest in <out>)")


def new_root_cmd() -> argparse.ArgumentParser:
    """Create root command."""
    common = _common_flags()
    parser = argparse.ArgumentParser(
        prog="scale-agent",
        description="Scale-adaptive sliding-window segmentation with a learned context-scale agent",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("generate-data", parents=[common], help="Write synthetic train/test scenes")
    p.add_argument("--scenes", type=int, default=None, help="Number of training scenes")
    p.add_argument("--test-scenes", type=int, default=None, help="Number of held-out scenes")
    p.add_argument("--workers", type=int, default=None, help="Worker processes (default: 1)")

    p = sub.add_parser("pretrain", parents=[common], help="Pretrain the segmenter on random scales")
    _training_flags(p)

    p = sub.add_parser("train-agent", parents=[common], help="Train the scale agent, segmenter frozen")
    _training_flags(p)
    p.add_argument("--segnet", type=str, help="Segmenter checkpoint (default: <out>/segnet.gack)")

    p = sub.add_parser("train-joint", parents=[common], help="Alternate segmenter and agent blocks")
    _training_flags(p)
    _model_flags(p)

    p = sub.add_parser("map", parents=[common], help="Segment a raster with the greedy agent")
    p.add_argument("input", type=str, help="Raster (GATN, PGM or PPM)")
    p.add_argument("--name", type=str, default=None, help="Output file stem (default: input stem)")
    _model_flags(p)

    p = sub.add_parser("eval", parents=[common], help="Score a predicted label map against the truth")
    p.add_argument("--pred", type=str, required=True, help="Predicted labels (GATN or PGM)")
    p.add_argument("--truth", type=str, required=True, help="True labels (GATN or PGM)")
    p.add_argument("--classes", type=int, default=None, help="Class count K (default: segnet.classes)")

    p = sub.add_parser("ablate", parents=[common], help="Evaluate every policy on the held-out scenes")
    p.add_argument("--dataset", type=str, help="Held-out manifest (default: <out>/test/manifest.tsv)")
    p.add_argument("--policies", type=str, default=None, help="Comma-separated policy names")
    _model_flags(p)

    p = sub.add_parser("export-action-map", parents=[common], help="Paint the selected scale per patch")
    p.add_argument("input", type=str, nargs="?", help="Raster (GATN, PGM or PPM)")
    p.add_argument("--dataset", type=str, help="Manifest to take a labelled scene from")
    p.add_argument("--scene", type=int, default=None, help="Scene index in --dataset")
    p.add_argument("--policy", type=str, default="learned", help="Policy name (default: learned)")
    p.add_argument("--name", type=str, default=None, help="Output file stem")
    _model_flags(p)

    p = sub.add_parser("grad-check", parents=[common], help="Finite-difference gradient checks")
    p.add_argument("--eps", type=float, default=1e-5, help="Central difference step (default: 1e-5)")
    p.add_argument("--max-checks", type=int, default=6,
                   help="Checked entries per network parameter (default: 6)")
    return parser


def _overrides(parsed: argparse.Namespace) -> Dict[str, object]:
    overrides = {"seed": parsed.seed, "out": parsed.out}
    if parsed.command in ("pretrain", "train-agent", "train-joint"):
        overrides["dataset"] = parsed.dataset
    if parsed.command == "ablate":
        overrides["test_dataset"] = parsed.dataset
    if parsed.command == "generate-data":
        overrides["train_scenes"] = parsed.scenes
        overrides["test_scenes"] = parsed.test_scenes
        overrides["workers"] = parsed.workers
    return overrides


def _dataset(cfg: RunConfig, split: str) -> str:
    configured = cfg.dataset if split == "train" else (cfg.test_dataset or cfg.dataset)
    if configured:
        return configured
    default = Path(cfg.out) / split / "manifest.tsv"
    if not default.exists():
        raise DatasetError(f"No {split} dataset configured and {default} does not exist")
    return str(default)


def _load_raster(path: str, channels: int) -> Raster:
    data = load_array(path)
    if data.dtype == np.uint8:
        data = data.astype(np.float64) / 255.0
    if data.ndim == 2:
        data = data[None]
    if data.ndim != 3 or data.shape[0] != channels:
        raise ShapeError(f"{path}: expected a {channels}-channel raster, got shape {data.shape}")
    return Raster(data.astype(np.float64))


def _load_labels(path: str, classes: int) -> np.ndarray:
    data = load_array(path)
    if data.ndim == 3 and data.shape[0] == 1:
        data = data[0]
    if data.ndim != 2:
        raise ShapeError(f"{path}: expected a 2-D label map, got shape {data.shape}")
    if Path(path).suffix.lower() == ".pgm":
        # label PGMs store class * 255 / (K - 1)
        data = np.rint(data.astype(np.float64) * (classes - 1) / 255.0)
    return data.astype(np.int64)


def _models(cfg: RunConfig, parsed: argparse.Namespace, need_agent: bool = True):
    out = Path(cfg.out)
    segnet = build_segnet(cfg, resolve_checkpoint(out, parsed.segnet, JOINT_SEGNET_CHECKPOINT, SEGNET_CHECKPOINT))
    agent = None
    try:
        agent = build_agent(cfg, resolve_checkpoint(out, parsed.agent, JOINT_AGENT_CHECKPOINT, AGENT_CHECKPOINT))
    except CheckpointError:
        if need_agent:
            raise
    return segnet, agent


def _run_generate_data(cfg: RunConfig, parsed, log: RunLogManager, metrics: MetricsCollector) -> int:
    scene = cfg.scene.model_copy(update={"seed": cfg.seed})
    out = Path(cfg.out)
    for split, count in (("train", cfg.train_scenes), ("test", cfg.test_scenes)):
        metrics.start_phase(f"generate-{split}")
        split_cfg = scene.model_copy(update={"seed": split_seed(cfg.seed, split)})
        manifest = generate_dataset(split_cfg, count, out / split, workers=cfg.workers)
        metrics.complete_phase(f"generate-{split}", steps=count)
        log.log_artifact(f"{split}_manifest", str(manifest.path))
    return 0


def _run_pretrain(cfg, parsed, log, metrics) -> int:
    cfg = cfg.model_copy(update={"dataset": _dataset(cfg, "train")})
    path = pretrain_segmenter(cfg, resume=parsed.resume, stop_after=parsed.stop_after, log=log, metrics=metrics)
    log.log_artifact("segnet", str(path))
    return 0


def _run_train_agent(cfg, parsed, log, metrics) -> int:
    cfg = cfg.model_copy(update={"dataset": _dataset(cfg, "train")})
    path = train_agent(cfg, resume=parsed.resume, stop_after=parsed.stop_after, segnet_checkpoint=parsed.segnet,
                       log=log, metrics=metrics)
    log.log_artifact("agent", str(path))
    return 0


def _run_train_joint(cfg, parsed, log, metrics) -> int:
    cfg = cfg.model_copy(update={"dataset": _dataset(cfg, "train")})
    seg_path, agent_path = train_joint(cfg, resume=parsed.resume, stop_after=parsed.stop_after,
                                       segnet_checkpoint=parsed.segnet, agent_checkpoint=parsed.agent,
                                       log=log, metrics=metrics)
    log.log_artifact("segnet", str(seg_path))
    log.log_artifact("agent", str(agent_path))
    return 0


def _run_map(cfg, parsed, log, metrics) -> int:
    segnet, agent = _models(cfg, parsed)
    raster = _load_raster(parsed.input, cfg.segnet.in_channels)
    name = parsed.name or Path(parsed.input).name.split(".")[0]
    metrics.start_phase("map")
    result = map_image(cfg, segnet, agent, raster, cfg.out, name)
    metrics.complete_phase("map", steps=len(result.episode.actions))
    log.log_artifact("map", str(Path(cfg.out) / f"{name}.labels.gatn"))
    return 0


def _run_eval(cfg, parsed, log, metrics) -> int:
    classes = parsed.classes or cfg.segnet.classes
    pred = _load_labels(parsed.pred, classes)
    truth = _load_labels(parsed.truth, classes)
    if pred.shape != truth.shape:
        raise ShapeError(f"Prediction {pred.shape} and truth {truth.shape} differ in size")
    cm = confusion(truth, pred, classes)
    m_iou, m_f1 = miou(cm), mf1(cm)
    print(f"miou\t{m_iou:.4f}")
    print(f"mf1\t{m_f1:.4f}")
    print(f"score\t{m_iou + m_f1:.4f}")
    return 0


def _run_ablate(cfg, parsed, log, metrics) -> int:
    names = parsed.policies.split(",") if parsed.policies else list(cfg.policies)
    segnet, agent = _models(cfg, parsed, need_agent=False)
    scenes = open_scenes(_dataset(cfg, "test"), cfg)
    summaries: List[Dict] = []
    frames = []
    for name in names:
        if name in ("learned", "single_branch") and agent is None:
            log.log_error("missing_agent", f"skipping policy {name}: no agent checkpoint")
            continue
        policy = build_policy(name, cfg.agent.actions, agent)
        metrics.start_phase(f"ablate-{name}")
        report = evaluate_policy(policy, scenes, segnet, cfg.patch_hw, cfg.thumb_hw, cfg.agent.actions,
                                 cfg.segnet.classes, cfg.random_seeds)
        metrics.complete_phase(f"ablate-{name}", steps=len(report.scenes), final_value=report.summary()["score"])
        summaries.append(report.summary())
        frames.append(report.scenes.assign(policy=name))
    scenes_frame = pd.concat(frames, ignore_index=True) if frames else None
    generator = ReportGenerator(cfg.out)
    info = {"dataset": str(scenes.manifest.path), "scenes": len(scenes), "seed": cfg.seed}
    run_metrics = asdict(metrics.get_run_metrics())
    reports = generator.generate_all_reports(summaries, info, scenes_frame, run_metrics, name="ablation")
    for kind, path in reports.items():
        log.log_artifact(f"ablation_{kind}", path)
    render_table(summaries, title="Ablation", console=Console())
    return 0


def _run_export_action_map(cfg, parsed, log, metrics) -> int:
    segnet, agent = _models(cfg, parsed, need_agent=parsed.policy in ("learned", "single_branch"))
    policy = build_policy(parsed.policy, cfg.agent.actions, agent)
    labels = None
    if parsed.input:
        raster = _load_raster(parsed.input, cfg.segnet.in_channels)
        name = parsed.name or Path(parsed.input).name.split(".")[0]
    else:
        if parsed.scene is None:
            raise DatasetError("Give a raster or --scene with a dataset")
        manifest = load_manifest(parsed.dataset or _dataset(cfg, "test"))
        if not 0 <= parsed.scene < len(manifest):
            raise DatasetError(f"Scene {parsed.scene} outside [0, {len(manifest)})")
        raster, labels = manifest.load(parsed.scene)
        name = parsed.name or manifest.entries[parsed.scene].id
    result = infer(policy, segnet, raster, cfg.patch_hw, cfg.thumb_hw, cfg.segnet.classes, labels)
    path = write_action_map(Path(cfg.out), name, action_map(result, raster.shape), cfg.agent.actions)
    log.log_artifact("action_map", str(path))
    return 0


def _run_grad_check(cfg, parsed, log, metrics) -> int:
    metrics.start_phase("grad-check")
    results = run_grad_checks(seed=cfg.seed, eps=parsed.eps, max_checks=parsed.max_checks)
    worst = max(results.values())
    metrics.complete_phase("grad-check", steps=len(results), final_value=worst)

    table = Table(title="Gradient check")
    table.add_column("Component", style="cyan")
    table.add_column("Max relative error", justify="right")
    table.add_column("Status")
    for name, err in results.items():
        ok = err <= TOLERANCE
        table.add_row(name, f"{err:.3e}", "[green]ok[/green]" if ok else "[red]FAIL[/red]")
    Console().print(table)

    failed = [name for name, err in results.items() if err > TOLERANCE]
    if failed:
        print(f"Error: gradient check failed for {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


HANDLERS: Dict[str, Callable[..., int]] = {
    "generate-data": _run_generate_data,
    "pretrain": _run_pretrain,
    "train-agent": _run_train_agent,
    "train-joint": _run_train_joint,
    "map": _run_map,
    "eval": _run_eval,
    "ablate": _run_ablate,
    "export-action-map": _run_export_action_map,
    "grad-check": _run_grad_check,
}


def execute(args: Optional[List[str]] = None) -> int:
    """Execute root command."""
    parser = new_root_cmd()
    parsed_args = parser.parse_args(args)

    try:
        config = ScaleAgentConfig(parsed_args.config, overrides=_overrides(parsed_args))
    except ConfigError as ce:
        if parsed_args.debug:
            raise
        print(f"[Config Error] {ce}", file=sys.stderr)
        return 2

    cfg = config.run
    out = config.get_out_dir()
    log = None
    try:
        out.mkdir(parents=True, exist_ok=True)
        log = RunLogManager(log_dir=str(out), level="DEBUG" if parsed_args.debug else "INFO",
                            quiet=parsed_args.quiet)
        metrics = MetricsCollector(metrics_file=str(out / "metrics.json"))
        return HANDLERS[parsed_args.command](cfg, parsed_args, log, metrics)
    except ScaleAgentError as e:
        if parsed_args.debug:
            raise
        if log:
            log.log_error(type(e).__name__, str(e))
        print(f"Error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        if parsed_args.debug:
            raise
        print(f"Error: {e}", file=sys.stderr)
        return 1
    finally:
        if log:
            log.close()
