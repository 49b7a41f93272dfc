"""
Minimal differentiable building blocks on float64 numpy arrays.

Every layer is functional with respect to activations: ``forward`` returns the
output plus a cache, ``backward(dy, cache)`` returns the input gradient and
accumulates parameter gradients. A layer can therefore be applied several
times per step (shared weights) as long as each call keeps its own cache.

Activations are batched ``(N, C, H, W)`` for spatial ops and ``(N, D)`` for
dense ops.
"""

import logging
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from .exceptions import CheckpointError, ShapeError
from .rng import named_stream

logger = logging.getLogger(__name__)


class Tensor:
    """Values plus a same-shape gradient buffer."""

    def __init__(self, value: np.ndarray):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def dims(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


class Parameter(Tensor):
    """Named trainable tensor with a momentum buffer."""

    def __init__(self, name: str, value: np.ndarray):
        super().__init__(value)
        self.name = name
        self.momentum = np.zeros_like(self.value)

    def assign(self, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.value.shape:
            raise CheckpointError(f"{self.name}: shape {value.shape} does not match {self.value.shape}")
        self.value[...] = value

    def __repr__(self) -> str:
        return f"Parameter({self.name}, dims={self.dims})"


def he_uniform(seed: int, name: str, shape: Tuple[int, ...], fan_in: int, gain: float = 1.0) -> np.ndarray:
    """Uniform He-style fan-in init drawn from the parameter's own stream."""
    bound = gain * np.sqrt(6.0 / fan_in)
    return named_stream(seed, name).uniform(-bound, bound, size=shape)


class Module:
    """Owns parameters and child modules; names are unique within a tree."""

    def __init__(self, name: str):
        self.name = name
        self._params: List[Parameter] = []
        self._children: List["Module"] = []

    def add_parameter(self, param: Parameter) -> Parameter:
        self._params.append(param)
        return param

    def add_module(self, module: "Module") -> "Module":
        self._children.append(module)
        return module

    def parameters(self) -> List[Parameter]:
        params = list(self._params)
        for child in self._children:
            params.extend(child.parameters())
        return params

    def named_parameters(self) -> Dict[str, Parameter]:
        named: Dict[str, Parameter] = {}
        for p in self.parameters():
            if p.name in named:
                raise ShapeError(f"Duplicate parameter name: {p.name}")
            named[p.name] = p
        return named

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        named = self.named_parameters()
        if strict:
            missing = sorted(set(named) - set(state))
            extra = sorted(k for k in set(state) - set(named) if k.startswith(self.name + "."))
            if missing or extra:
                raise CheckpointError(f"Checkpoint mismatch for {self.name}: missing={missing[:3]} unexpected={extra[:3]}")
        for name, p in named.items():
            if name in state:
                p.assign(state[name])


# --- layers ---

class Conv2d(Module):
    def __init__(self, name: str, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, padding: int = 0, seed: int = 0, gain: float = 1.0):
        super().__init__(name)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = self.add_parameter(Parameter(f"{name}.weight", he_uniform(seed, f"{name}.weight", shape, fan_in, gain)))
        self.bias = self.add_parameter(Parameter(f"{name}.bias", np.zeros(out_channels)))

    def output_size(self, h: int, w: int) -> Tuple[int, int]:
        return ((h + 2 * self.padding - self.k) // self.stride + 1,
                (w + 2 * self.padding - self.k) // self.stride + 1)

    def forward(self, x: np.ndarray):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"{self.name}: expected (N, {self.in_channels}, H, W), got {x.shape}")
        n, c, h, w = x.shape
        k, s, p = self.k, self.stride, self.padding
        ho, wo = self.output_size(h, w)
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"{self.name}: input {h}x{w} too small for kernel {k}")
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        wmat = self.weight.value.reshape(self.out_channels, -1)
        y = (cols @ wmat.T + self.bias.value).reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y), (x.shape, xp.shape, cols)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        x_shape, xp_shape, cols = cache
        n, c, h, w = x_shape
        k, s, p = self.k, self.stride, self.padding
        _, o, ho, wo = dy.shape
        dflat = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        self.weight.grad += (dflat.T @ cols).reshape(self.weight.value.shape)
        self.bias.grad += dflat.sum(axis=0)
        dcols = (dflat @ self.weight.value.reshape(o, -1)).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros(xp_shape)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if p:
            return dxp[:, :, p:p + h, p:p + w]
        return dxp


class Dense(Module):
    def __init__(self, name: str, in_features: int, out_features: int, seed: int = 0, gain: float = 1.0):
        super().__init__(name)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = self.add_parameter(Parameter(
            f"{name}.weight", he_uniform(seed, f"{name}.weight", (out_features, in_features), in_features, gain)))
        self.bias = self.add_parameter(Parameter(f"{name}.bias", np.zeros(out_features)))

    def forward(self, x: np.ndarray):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"{self.name}: expected (N, {self.in_features}), got {x.shape}")
        return x @ self.weight.value.T + self.bias.value, x

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        x = cache
        self.weight.grad += dy.T @ x
        self.bias.grad += dy.sum(axis=0)
        return dy @ self.weight.value


def relu(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dy * mask


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) half-pixel-aligned linear interpolation weights."""
    if n_in <= 0 or n_out <= 0:
        raise ShapeError(f"Cannot resize {n_in} -> {n_out}")
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_resize(x: np.ndarray, out_hw: Tuple[int, int]):
    """Resize ``(N, C, h, w)`` to ``out_hw``; cache holds the two weight matrices."""
    ah = bilinear_matrix(x.shape[2], out_hw[0])
    aw = bilinear_matrix(x.shape[3], out_hw[1])
    return np.einsum("ih,nchw,jw->ncij", ah, x, aw, optimize=True), (ah, aw)


def bilinear_resize_backward(dy: np.ndarray, cache) -> np.ndarray:
    ah, aw = cache
    return np.einsum("ih,ncij,jw->nchw", ah, dy, aw, optimize=True)


def nearest_upsample(x: np.ndarray, factor: int):
    return np.repeat(np.repeat(x, factor, axis=2), factor, axis=3), factor


def nearest_upsample_backward(dy: np.ndarray, factor: int) -> np.ndarray:
    n, c, h, w = dy.shape
    return dy.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))


def global_avg_pool(x: np.ndarray, mask: Optional[np.ndarray] = None):
    """Mean over spatial positions, or over masked positions only.

    ``mask`` is ``(N, H, W)`` of 0/1; the divisor is the masked count.
    """
    n, c, h, w = x.shape
    if mask is None:
        mask = np.ones((n, h, w))
    mask = mask.astype(np.float64)
    count = mask.sum(axis=(1, 2))
    if np.any(count == 0):
        raise ShapeError("Global average pool over an empty mask")
    pooled = (x * mask[:, None]).sum(axis=(2, 3)) / count[:, None]
    return pooled, (mask, count)


def global_avg_pool_backward(dy: np.ndarray, cache) -> np.ndarray:
    mask, count = cache
    return dy[:, :, None, None] * (mask / count[:, None, None])[:, None]


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean CE over every position; class axis is 1.

    ``target`` holds class indices with the logits' shape minus axis 1.
    Returns the loss and d(loss)/d(logits).
    """
    k = logits.shape[1]
    if target.shape != logits.shape[:1] + logits.shape[2:]:
        raise ShapeError(f"Target shape {target.shape} does not match logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= k):
        raise ShapeError(f"Target classes outside [0, {k})")
    logp = log_softmax(logits, axis=1)
    onehot = np.moveaxis(np.eye(k)[target], -1, 1)
    positions = target.size
    loss = float(-(onehot * logp).sum() / positions)
    grad = (np.exp(logp) - onehot) / positions
    return loss, grad


# --- optimisation ---

class OptimizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr: float = 0.001
    momentum: float = 0.9
    decay_factor: float = 0.5
    decay_every: int = 1000

    @field_validator("lr")
    @classmethod
    def validate_lr(cls, v):
        if v <= 0:
            raise ValueError("lr must be > 0")
        return v

    @field_validator("momentum")
    @classmethod
    def validate_momentum(cls, v):
        if not 0.0 <= v < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        return v

    @field_validator("decay_factor")
    @classmethod
    def validate_decay(cls, v):
        if not 0.0 < v <= 1.0:
            raise ValueError("decay_factor must be in (0, 1]")
        return v

    @field_validator("decay_every")
    @classmethod
    def validate_decay_every(cls, v):
        if v < 1:
            raise ValueError("decay_every must be >= 1")
        return v

    def lr_at(self, step: int) -> float:
        return self.lr * self.decay_factor ** (step // self.decay_every)


def sgd_step(params: Iterable[Parameter], config: OptimizerConfig, step: int) -> None:
    """Classical momentum: v = mu*v + g; p -= lr(step)*v."""
    lr = config.lr_at(step)
    for p in params:
        p.momentum *= config.momentum
        p.momentum += p.grad
        p.value -= lr * p.momentum


class SGD:
    """Step-counting wrapper around ``sgd_step``."""

    def __init__(self, params: List[Parameter], config: OptimizerConfig):
        self.params = params
        self.config = config
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        sgd_step(self.params, self.config, self.step_count)
        self.step_count += 1

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {f"{p.name}#momentum": p.momentum.copy() for p in self.params}
        state["#step"] = np.array([float(self.step_count)])
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for p in self.params:
            key = f"{p.name}#momentum"
            if key not in state:
                raise CheckpointError(f"Optimizer state missing {key}")
            p.momentum[...] = state[key]
        self.step_count = int(state["#step"][0])


# --- gradient checking ---

Objective = Callable[[], Tuple[float, Callable[[], None]]]


def grad_check(objective: Objective, params: List[Parameter], eps: float = 1e-5,
               max_checks: Optional[int] = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``objective()`` runs a forward pass and returns ``(loss, backward)``;
    calling ``backward()`` must accumulate gradients into ``params``.
    With ``max_checks`` only that many entries per parameter are checked.
    """
    for p in params:
        p.zero_grad()
    _, backward = objective()
    backward()
    analytic = [p.grad.copy() for p in params]
    rng = named_stream(seed, "grad_check")
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.value.reshape(-1)
        indices = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            indices = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
        for idx in indices:
            original = flat[idx]
            flat[idx] = original + eps
            plus, _ = objective()
            flat[idx] = original - eps
            minus, _ = objective()
            flat[idx] = original
            numeric = (plus - minus) / (2 * eps)
            exact = grad.reshape(-1)[idx]
            diff = abs(exact - numeric)
            scale = max(abs(exact), abs(numeric))
            err = diff / scale if scale > 1e-10 else diff
            if err > worst:
                worst = err
                logger.debug("grad_check %s[%d]: analytic=%.3e numeric=%.3e", p.name, idx, exact, numeric)
    for p in params:
        p.zero_grad()
    return float(worst)
