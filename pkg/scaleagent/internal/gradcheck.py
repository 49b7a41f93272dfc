"""Finite-difference checks for every layer and for small segmenter / agent networks."""

import logging
from typing import Callable, Dict, List, Optional

import numpy as np

from .neuralcore import (Conv2d, Dense, Parameter, bilinear_resize, bilinear_resize_backward, global_avg_pool,
                         global_avg_pool_backward, grad_check, log_softmax, nearest_upsample,
                         nearest_upsample_backward, relu, relu_backward, softmax_cross_entropy)
from .rng import named_stream
from .sca import AgentConfig, ScaleControlAgent, State, a2c_terms
from .segnet import SegNet, SegNetConfig, seg_loss
from .tiling import PatchSpec, Raster, context_window, extract_context, extract_context_labels, extract_local

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4


def _input_param(rng: np.random.Generator, shape, name: str = "x") -> Parameter:
    # keep away from the ReLU kink so central differences stay on one side
    values = rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Parameter(name, values)


def _linear_objective(x: Parameter, upstream: np.ndarray, forward: Callable, backward_fn: Callable):
    def objective():
        y, cache = forward(x.value)

        def backward():
            x.grad += backward_fn(upstream, cache)
        return float((y * upstream).sum()), backward
    return objective


def _check_conv(seed: int, eps: float, max_checks: Optional[int]) -> float:
    rng = named_stream(seed, "gradcheck.conv")
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    # strided windows must land on the last row and column
    h, w = (int(rng.integers(3, 9)) for _ in range(2))
    if stride == 2:
        h, w = h | 1, w | 1
    conv = Conv2d("conv", int(rng.integers(1, 4)), int(rng.integers(1, 5)), 3, stride=stride, padding=padding,
                  seed=seed)
    x = _input_param(rng, (int(rng.integers(1, 3)), conv.in_channels, h, w))
    upstream = rng.normal(size=(x.value.shape[0], conv.out_channels, *conv.output_size(h, w)))
    objective = _linear_objective(x, upstream, conv.forward, conv.backward)
    return grad_check(objective, conv.parameters() + [x], eps, max_checks=max_checks, seed=seed)


def _check_dense(seed: int, eps: float, max_checks: Optional[int]) -> float:
    rng = named_stream(seed, "gradcheck.dense")
    n, d_in, d_out = (int(v) for v in rng.integers(1, 7, size=3))
    dense = Dense("dense", d_in, d_out, seed=seed)
    x = _input_param(rng, (n, d_in))
    upstream = rng.normal(size=(n, d_out))
    objective = _linear_objective(x, upstream, dense.forward, dense.backward)
    return grad_check(objective, dense.parameters() + [x], eps, max_checks=max_checks, seed=seed)


def _check_unary(seed: int, eps: float, name: str, shape, out_shape, forward: Callable,
                 backward_fn: Callable, max_checks: Optional[int]) -> float:
    rng = named_stream(seed, f"gradcheck.{name}")
    x = _input_param(rng, shape)
    upstream = rng.normal(size=out_shape)
    return grad_check(_linear_objective(x, upstream, forward, backward_fn), [x], eps, max_checks=max_checks, seed=seed)


def _check_cross_entropy(seed: int, eps: float, max_checks: Optional[int]) -> float:
    rng = named_stream(seed, "gradcheck.cross_entropy")
    n, k = int(rng.integers(1, 3)), int(rng.integers(2, 6))
    h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    logits = Parameter("logits", rng.normal(size=(n, k, h, w)))
    target = rng.integers(0, k, size=(n, h, w))

    def objective():
        loss, grad = softmax_cross_entropy(logits.value, target)

        def backward():
            logits.grad += grad
        return loss, backward
    return grad_check(objective, [logits], eps, max_checks=max_checks, seed=seed)


def check_primitives(seed: int = 0, eps: float = 1e-5, max_checks: Optional[int] = None) -> Dict[str, float]:
    """Max relative error per layer primitive, on shapes drawn from ``seed``."""
    rng = named_stream(seed, "gradcheck.shapes")

    def nchw(low: int = 1, high: int = 6):
        return (int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(low, high)),
                int(rng.integers(low, high)))

    relu_shape = nchw()
    resize_in = nchw(2, 7)
    # upsampling only, so every input pixel carries weight
    resize_out = (int(rng.integers(resize_in[2], 2 * resize_in[2] + 2)),
                  int(rng.integers(resize_in[3], 2 * resize_in[3] + 2)))
    nearest_in = nchw(1, 5)
    factor = int(rng.integers(2, 4))
    gap_shape = nchw(1, 6)
    mask = (rng.uniform(size=(gap_shape[0], *gap_shape[2:])) < 0.5).astype(np.float64)
    mask[:, 0, 0] = 1.0
    return {
        "conv2d": _check_conv(seed, eps, max_checks),
        "dense": _check_dense(seed, eps, max_checks),
        "relu": _check_unary(seed, eps, "relu", relu_shape, relu_shape, relu, relu_backward, max_checks),
        "bilinear_resize": _check_unary(seed, eps, "bilinear", resize_in, (*resize_in[:2], *resize_out),
                                        lambda x: bilinear_resize(x, resize_out), bilinear_resize_backward,
                                        max_checks),
        "nearest_upsample": _check_unary(seed, eps, "nearest", nearest_in,
                                         (*nearest_in[:2], nearest_in[2] * factor, nearest_in[3] * factor),
                                         lambda x: nearest_upsample(x, factor), nearest_upsample_backward,
                                         max_checks),
        "masked_gap": _check_unary(seed, eps, "gap", gap_shape, gap_shape[:2],
                                   lambda x: global_avg_pool(x, mask), global_avg_pool_backward, max_checks),
        "cross_entropy": _check_cross_entropy(seed, eps, max_checks),
    }


def _check_segnet(seed: int, eps: float, max_checks: int) -> float:
    rng = named_stream(seed, "gradcheck.segnet")
    cfg = SegNetConfig(classes=3, in_channels=2, widths=[3, 4], fusion_channels=4)
    net = SegNet(cfg, seed=seed)
    raster = Raster(rng.uniform(0.0, 1.0, size=(2, 24, 24)))
    labels = rng.integers(0, 3, size=(24, 24))
    p = PatchSpec(8, 8, 8, 8)
    a = 2
    window = context_window(p, a, raster.shape)
    x_loc = extract_local(raster, p).data
    x_ctx = extract_context(raster, p, a).data
    y_patch = labels[8:16, 8:16]
    y_ctx = extract_context_labels(labels, p, a, cfg.classes)

    def objective():
        out = net.forward(x_loc, x_ctx, a, p, window)
        loss = seg_loss(out, y_patch, y_ctx, cfg.aux_weight)
        return loss.total, lambda: net.backward(out, loss)
    return grad_check(objective, net.parameters(), eps, max_checks=max_checks, seed=seed)


def _check_agent(seed: int, eps: float, max_checks: int) -> float:
    rng = named_stream(seed, "gradcheck.agent")
    cfg = AgentConfig(actions=3, in_channels=2, widths=[3, 4], index_channels=4, entropy_coef=0.1, actor_gain=1.0)
    agent = ScaleControlAgent(cfg, seed=seed)
    thumb = Raster(rng.uniform(0.0, 1.0, size=(2, 8, 8)))
    states: List[State] = []
    for r, c in ((0, 0), (4, 4)):
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[r:r + 4, c:c + 4] = 1
        states.append(State(thumbnail=thumb, position_mask=mask))
    actions = [1, 3]
    targets = rng.normal(size=2)
    advantages = targets - agent.forward(states).values
    rows = np.arange(len(actions))
    idx = np.asarray(actions) - 1

    def objective():
        out = agent.forward(states)
        logp = log_softmax(out.logits, axis=1)
        entropy = -(np.exp(logp) * logp).sum(axis=1).mean()
        total = (np.mean(-advantages * logp[rows, idx]) + cfg.value_coef * np.mean((out.values - targets) ** 2)
                 - cfg.entropy_coef * entropy)

        def backward():
            loss = a2c_terms(out.log_probs, out.values, actions, targets, cfg.value_coef, cfg.entropy_coef)
            agent.backward(out, loss.dlogits, loss.dvalues)
        return float(total), backward
    return grad_check(objective, agent.parameters(), eps, max_checks=max_checks, seed=seed)


def run_grad_checks(seed: int = 0, eps: float = 1e-5, max_checks: int = 6) -> Dict[str, float]:
    """Max relative error per component; primitives are checked exhaustively."""
    results = check_primitives(seed, eps)
    results["segnet"] = _check_segnet(seed, eps, max_checks)
    results["sca"] = _check_agent(seed, eps, max_checks)
    for name, err in results.items():
        logger.debug("grad check %s: %.3e", name, err)
    return results
