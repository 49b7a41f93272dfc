"""
Dual-branch scale-variable segmentation network.

One encoder is applied with the same weights to the local patch and to the
downsampled context patch. The context features covering the local footprint
are cropped by raster coordinates, resized to the local feature grid,
concatenated with the local features, fused by a 3x3 conv and classified by a
1x1 conv. Auxiliary 1x1 heads supervise each branch on its own.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from .exceptions import GeometryError, ShapeError
from .neuralcore import (Conv2d, Module, bilinear_resize, bilinear_resize_backward, relu,
                         relu_backward, softmax, softmax_cross_entropy)
from .tiling import (ContextWindow, PatchSpec, Raster, context_window, extract_context,
                     extract_context_labels, extract_local, extract_local_labels)

logger = logging.getLogger(__name__)


class SegNetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    classes: int = 4
    in_channels: int = 3
    widths: List[int] = [16, 32, 64]
    fusion_channels: int = 32
    aux_weight: float = 0.4

    @field_validator("classes")
    @classmethod
    def validate_classes(cls, v):
        if v < 2:
            raise ValueError("classes must be >= 2")
        return v

    @field_validator("widths")
    @classmethod
    def validate_widths(cls, v):
        if not v or any(w <= 0 for w in v):
            raise ValueError("widths must be a non-empty list of positive ints")
        return v

    @field_validator("aux_weight")
    @classmethod
    def validate_aux_weight(cls, v):
        if v < 0:
            raise ValueError("aux_weight must be >= 0")
        return v

    @property
    def stride(self) -> int:
        return 2 ** len(self.widths)


@dataclass
class BranchFeatures:
    f_l: np.ndarray
    f_c: Optional[np.ndarray] = None


@dataclass
class SegOutput:
    """Per-pixel ``(K, h, w)`` probabilities plus logits kept for the loss."""
    probs: np.ndarray
    aux_local: np.ndarray
    aux_context: Optional[np.ndarray]
    logits: np.ndarray
    aux_local_logits: np.ndarray
    aux_context_logits: Optional[np.ndarray]
    scale: int
    features: Optional[BranchFeatures] = None
    cache: Dict = field(default_factory=dict, repr=False)


@dataclass
class SegLoss:
    total: float
    terms: Dict[str, float]
    grads: Dict[str, np.ndarray] = field(repr=False, default_factory=dict)


def crop_bounds(p: PatchSpec, window: ContextWindow, feature_hw: Tuple[int, int],
                stride: int) -> Tuple[int, int, int, int]:
    """Feature rows/cols of the context map whose footprints touch the patch."""
    a = window.scale
    cell_h = a * stride
    cell_w = a * stride
    rel_r0 = p.row - window.row
    rel_r1 = rel_r0 + p.h
    rel_c0 = p.col - window.col
    rel_c1 = rel_c0 + p.w
    hf, wf = feature_hw
    r0 = max(0, rel_r0 // cell_h)
    r1 = min(hf, -(-rel_r1 // cell_h))
    c0 = max(0, rel_c0 // cell_w)
    c1 = min(wf, -(-rel_c1 // cell_w))
    if r1 <= r0 or c1 <= c0:
        raise GeometryError(f"Crop for patch {p} in window {window} is empty")
    return r0, r1, c0, c1


def crop_context_features(f_c: np.ndarray, p: PatchSpec, window: ContextWindow,
                          stride: int) -> np.ndarray:
    r0, r1, c0, c1 = crop_bounds(p, window, f_c.shape[-2:], stride)
    return f_c[..., r0:r1, c0:c1]


def seg_loss(outputs: SegOutput, y_patch: np.ndarray, y_context: Optional[np.ndarray],
             aux_weight: float = 0.4) -> SegLoss:
    """CE(final) + w*CE(aux local) + w*CE(aux context); last term only when a > 1."""
    terms: Dict[str, float] = {}
    grads: Dict[str, np.ndarray] = {}
    terms["final"], grads["final"] = softmax_cross_entropy(outputs.logits[None], y_patch[None])
    ce, g = softmax_cross_entropy(outputs.aux_local_logits[None], y_patch[None])
    terms["aux_local"], grads["aux_local"] = ce, aux_weight * g
    if outputs.aux_context_logits is not None:
        if y_context is None:
            raise ShapeError("Context labels are required when the context branch is active")
        ce, g = softmax_cross_entropy(outputs.aux_context_logits[None], y_context[None])
        terms["aux_context"], grads["aux_context"] = ce, aux_weight * g
    total = terms["final"] + aux_weight * terms["aux_local"] + aux_weight * terms.get("aux_context", 0.0)
    return SegLoss(total=total, terms=terms, grads=grads)


class SegNet(Module):
    """Shared-encoder dual-branch segmenter; parameters are prefixed ``seg.``."""

    def __init__(self, config: SegNetConfig, seed: int = 0):
        super().__init__("seg")
        self.config = config
        channels = [config.in_channels] + list(config.widths)
        self.encoder = [
            self.add_module(Conv2d(f"seg.enc{i}", channels[i], channels[i + 1], 3, stride=2, padding=1, seed=seed))
            for i in range(len(config.widths))
        ]
        c = config.widths[-1]
        self.fuse = self.add_module(Conv2d("seg.fuse", 2 * c, config.fusion_channels, 3, padding=1, seed=seed))
        self.cls = self.add_module(Conv2d("seg.cls", config.fusion_channels, config.classes, 1, seed=seed))
        self.aux_local_head = self.add_module(Conv2d("seg.aux_local", c, config.classes, 1, seed=seed))
        self.aux_context_head = self.add_module(Conv2d("seg.aux_context", c, config.classes, 1, seed=seed))

    @property
    def stride(self) -> int:
        return self.config.stride

    # --- encoder ---

    def encode(self, x: np.ndarray):
        caches = []
        for conv in self.encoder:
            x, conv_cache = conv.forward(x)
            x, mask = relu(x)
            caches.append((conv_cache, mask))
        return x, caches

    def encode_backward(self, df: np.ndarray, caches) -> np.ndarray:
        for conv, (conv_cache, mask) in zip(reversed(self.encoder), reversed(caches)):
            df = conv.backward(relu_backward(df, mask), conv_cache)
        return df

    def _head(self, head: Conv2d, f: np.ndarray, out_hw: Tuple[int, int]):
        small, head_cache = head.forward(f)
        logits, resize_cache = bilinear_resize(small, out_hw)
        return logits, (head_cache, resize_cache)

    def _head_backward(self, head: Conv2d, dlogits: np.ndarray, cache) -> np.ndarray:
        head_cache, resize_cache = cache
        return head.backward(bilinear_resize_backward(dlogits, resize_cache), head_cache)

    # --- forward / backward ---

    def forward(self, x_loc: np.ndarray, x_ctx: Optional[np.ndarray], a: int, p: PatchSpec,
                window: Optional[ContextWindow] = None) -> SegOutput:
        x_loc = np.asarray(x_loc, dtype=np.float64)
        c, h, w = x_loc.shape
        s = self.stride
        if h % s or w % s or (h, w) != (p.h, p.w):
            raise ShapeError(f"Local input {h}x{w} must be {p.h}x{p.w} and divisible by {s}")
        f_l, enc_l = self.encode(x_loc[None])
        cache: Dict = {"enc_l": enc_l, "f_l_shape": f_l.shape}
        f_c = None
        if a > 1:
            if x_ctx is None or window is None:
                raise GeometryError("Context input and window are required for scale > 1")
            if x_ctx.shape != x_loc.shape:
                raise ShapeError(f"Context patch {x_ctx.shape} must match local patch {x_loc.shape}")
            f_c, enc_c = self.encode(np.asarray(x_ctx, dtype=np.float64)[None])
            bounds = crop_bounds(p, window, f_c.shape[-2:], s)
            r0, r1, c0, c1 = bounds
            up, up_cache = bilinear_resize(f_c[:, :, r0:r1, c0:c1], f_l.shape[-2:])
            cache.update(enc_c=enc_c, f_c_shape=f_c.shape, bounds=bounds, up_cache=up_cache)
            fused_in = np.concatenate([f_l, up], axis=1)
        else:
            fused_in = np.concatenate([f_l, np.zeros_like(f_l)], axis=1)
        z, fuse_cache = self.fuse.forward(fused_in)
        z, fuse_mask = relu(z)
        logits, cls_cache = self._head(self.cls, z, (h, w))
        aux_l_logits, aux_l_cache = self._head(self.aux_local_head, f_l, (h, w))
        cache.update(fuse_cache=fuse_cache, fuse_mask=fuse_mask, cls_cache=cls_cache, aux_l_cache=aux_l_cache)
        aux_c_logits = None
        if f_c is not None:
            aux_c_logits, aux_c_cache = self._head(self.aux_context_head, f_c, (h, w))
            cache["aux_c_cache"] = aux_c_cache
        return SegOutput(
            probs=softmax(logits, axis=1)[0],
            aux_local=softmax(aux_l_logits, axis=1)[0],
            aux_context=None if aux_c_logits is None else softmax(aux_c_logits, axis=1)[0],
            logits=logits[0],
            aux_local_logits=aux_l_logits[0],
            aux_context_logits=None if aux_c_logits is None else aux_c_logits[0],
            scale=a,
            features=BranchFeatures(f_l=f_l[0], f_c=None if f_c is None else f_c[0]),
            cache=cache,
        )

    def backward(self, out: SegOutput, loss: SegLoss) -> None:
        """Accumulate parameter gradients for ``loss`` computed on ``out``."""
        cache = out.cache
        dz = self._head_backward(self.cls, loss.grads["final"], cache["cls_cache"])
        dfused = self.fuse.backward(relu_backward(dz, cache["fuse_mask"]), cache["fuse_cache"])
        c = cache["f_l_shape"][1]
        df_l = dfused[:, :c] + self._head_backward(self.aux_local_head, loss.grads["aux_local"], cache["aux_l_cache"])
        self.encode_backward(df_l, cache["enc_l"])
        if out.scale > 1:
            r0, r1, c0, c1 = cache["bounds"]
            df_c = np.zeros(cache["f_c_shape"])
            df_c[:, :, r0:r1, c0:c1] = bilinear_resize_backward(dfused[:, c:], cache["up_cache"])
            if "aux_context" in loss.grads:
                df_c += self._head_backward(self.aux_context_head, loss.grads["aux_context"], cache["aux_c_cache"])
            self.encode_backward(df_c, cache["enc_c"])

    # --- single-branch variants ---

    def single_branch_forward(self, x: np.ndarray, a: int, p: PatchSpec,
                              window: Optional[ContextWindow] = None) -> np.ndarray:
        """One branch only: local head for a=1, cropped context head otherwise."""
        x = np.asarray(x, dtype=np.float64)
        f, _ = self.encode(x[None])
        if a == 1:
            logits, _ = self._head(self.aux_local_head, f, (p.h, p.w))
        else:
            if window is None:
                raise GeometryError("Context window is required for scale > 1")
            cropped = crop_context_features(f, p, window, self.stride)
            resized, _ = bilinear_resize(cropped, f.shape[-2:])
            logits, _ = self._head(self.aux_context_head, resized, (p.h, p.w))
        return softmax(logits, axis=1)[0]

    # --- raster-level helpers ---

    def predict_patch(self, raster: Raster, p: PatchSpec, a: int) -> SegOutput:
        x_loc = extract_local(raster, p).data
        if a == 1:
            return self.forward(x_loc, None, 1, p)
        window = context_window(p, a, raster.shape)
        x_ctx = extract_context(raster, p, a).data
        return self.forward(x_loc, x_ctx, a, p, window)

    def predict_single_branch(self, raster: Raster, p: PatchSpec, a: int) -> np.ndarray:
        if a == 1:
            return self.single_branch_forward(extract_local(raster, p).data, 1, p)
        window = context_window(p, a, raster.shape)
        return self.single_branch_forward(extract_context(raster, p, a).data, a, p, window)

    def training_step(self, raster: Raster, labels: np.ndarray, p: PatchSpec, a: int) -> SegLoss:
        """Forward, loss and backward for one patch at scale ``a``; grads accumulate."""
        out = self.predict_patch(raster, p, a)
        y_patch = extract_local_labels(labels, p)
        y_context = extract_context_labels(labels, p, a, self.config.classes) if a > 1 else None
        loss = seg_loss(out, y_patch, y_context, self.config.aux_weight)
        self.backward(out, loss)
        return loss
