"""
Raster geometry: sliding-window grids, local/context patch extraction,
thumbnails, position masks and stitching predictions back into a map.

Rasters are channel-first ``(C, H, W)`` float64 arrays; label masks are
``(H, W)`` integer arrays.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import CoverageError, DimensionError, ShapeError

LabelMask = np.ndarray


@dataclass
class Raster:
    """Multi-channel image with an integer pixel origin."""
    data: np.ndarray
    origin: Tuple[int, int] = (0, 0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise ShapeError(f"Raster data must be (C, H, W), got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ShapeError("Raster contains non-finite values")
        self.data = data

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width


@dataclass(frozen=True)
class PatchSpec:
    """Top-left corner, size and (optionally) the selected context scale."""
    row: int
    col: int
    h: int
    w: int
    scale: Optional[int] = None

    def with_scale(self, scale: int) -> "PatchSpec":
        return replace(self, scale=int(scale))

    @property
    def center(self) -> Tuple[float, float]:
        return self.row + self.h / 2.0, self.col + self.w / 2.0


@dataclass(frozen=True)
class ContextWindow:
    """Placement of the (a*h) x (a*w) context window in raster pixels.

    ``row``/``col`` may be negative (or the window may run past the far edge)
    only when the window is larger than the raster; those rows/cols are
    edge-replicated.
    """
    row: int
    col: int
    h: int
    w: int
    scale: int


@dataclass
class TileGrid:
    """Row-major list of patches covering a raster."""
    patches: List[PatchSpec] = field(default_factory=list)
    raster_hw: Tuple[int, int] = (0, 0)
    rows: List[int] = field(default_factory=list)
    cols: List[int] = field(default_factory=list)

    @property
    def T(self) -> int:
        return len(self.patches)

    def __len__(self) -> int:
        return len(self.patches)

    def __iter__(self) -> Iterator[PatchSpec]:
        return iter(self.patches)

    def __getitem__(self, index: int) -> PatchSpec:
        return self.patches[index]


def tile_starts(total: int, size: int) -> List[int]:
    """Stride-``size`` starts, last one anchored to the far edge."""
    if size <= 0:
        raise DimensionError(f"Patch size must be positive, got {size}")
    if size > total:
        raise DimensionError(f"Patch size {size} exceeds raster extent {total}")
    starts = list(range(0, total - size + 1, size))
    if starts[-1] != total - size:
        starts.append(total - size)
    return starts


def build_grid(raster: Raster, h: int, w: int) -> TileGrid:
    H, W = raster.shape
    if h > H or w > W:
        raise DimensionError(f"Patch {h}x{w} is larger than raster {H}x{W}")
    rows = tile_starts(H, h)
    cols = tile_starts(W, w)
    patches = [PatchSpec(r, c, h, w) for r in rows for c in cols]
    return TileGrid(patches=patches, raster_hw=(H, W), rows=rows, cols=cols)


def _check_bounds(p: PatchSpec, hw: Tuple[int, int]) -> None:
    H, W = hw
    if p.h <= 0 or p.w <= 0 or not (0 <= p.row <= H - p.h and 0 <= p.col <= W - p.w):
        raise DimensionError(f"Patch ({p.row}, {p.col}, {p.h}, {p.w}) is outside raster {H}x{W}")


def extract_local(raster: Raster, p: PatchSpec) -> Raster:
    _check_bounds(p, raster.shape)
    crop = raster.data[:, p.row:p.row + p.h, p.col:p.col + p.w].copy()
    return Raster(crop, origin=(raster.origin[0] + p.row, raster.origin[1] + p.col))


def _place_axis(start: int, size: int, scale: int, total: int) -> int:
    extent = scale * size
    ideal = start - ((scale - 1) * size) // 2
    if extent <= total:
        return int(np.clip(ideal, 0, total - extent))
    return int(np.clip(ideal, total - extent, 0))


def context_window(p: PatchSpec, a: int, raster_hw: Tuple[int, int]) -> ContextWindow:
    """Center the scaled window on the patch, translating it to fit where possible."""
    if a < 1:
        raise DimensionError(f"Context scale must be >= 1, got {a}")
    _check_bounds(p, raster_hw)
    H, W = raster_hw
    return ContextWindow(
        row=_place_axis(p.row, p.h, a, H),
        col=_place_axis(p.col, p.w, a, W),
        h=a * p.h,
        w=a * p.w,
        scale=a,
    )


def _window_indices(window: ContextWindow, raster_hw: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    H, W = raster_hw
    rows = np.clip(window.row + np.arange(window.h), 0, H - 1)
    cols = np.clip(window.col + np.arange(window.w), 0, W - 1)
    return rows, cols


def box_downsample(data: np.ndarray, fh: int, fw: Optional[int] = None) -> np.ndarray:
    """Area-average ``(..., H, W)`` by integer factors."""
    fw = fh if fw is None else fw
    *lead, H, W = data.shape
    if H % fh or W % fw:
        raise DimensionError(f"{H}x{W} is not divisible by {fh}x{fw}")
    if fh == 1 and fw == 1:
        return data.copy()
    blocks = data.reshape(*lead, H // fh, fh, W // fw, fw)
    return blocks.mean(axis=(-3, -1))


def extract_context(raster: Raster, p: PatchSpec, a: int) -> Raster:
    window = context_window(p, a, raster.shape)
    if a == 1:
        return extract_local(raster, p)
    rows, cols = _window_indices(window, raster.shape)
    full = raster.data[:, rows][:, :, cols]
    return Raster(box_downsample(full, a), origin=(raster.origin[0] + window.row, raster.origin[1] + window.col))


def majority_downsample(labels: np.ndarray, factor: int, classes: int) -> np.ndarray:
    """Per-block most frequent class; ties go to the lowest index."""
    H, W = labels.shape
    if H % factor or W % factor:
        raise DimensionError(f"{H}x{W} is not divisible by {factor}")
    if factor == 1:
        return labels.copy()
    blocks = labels.reshape(H // factor, factor, W // factor, factor).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(H // factor, W // factor, factor * factor)
    counts = (blocks[..., None] == np.arange(classes)).sum(axis=2)
    return np.argmax(counts, axis=-1).astype(labels.dtype)


def extract_context_labels(labels: LabelMask, p: PatchSpec, a: int, classes: int) -> LabelMask:
    """Labels over the context footprint, majority-downsampled to h x w."""
    window = context_window(p, a, labels.shape)
    rows, cols = _window_indices(window, labels.shape)
    return majority_downsample(labels[rows][:, cols], a, classes)


def extract_local_labels(labels: LabelMask, p: PatchSpec) -> LabelMask:
    _check_bounds(p, labels.shape)
    return labels[p.row:p.row + p.h, p.col:p.col + p.w].copy()


def area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) weights averaging each output cell's source interval."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo, hi = edges[:-1, None], edges[1:, None]
    src = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, src + 1) - np.maximum(lo, src), 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def make_thumbnail(raster: Raster, h_t: int, w_t: int) -> Raster:
    H, W = raster.shape
    if h_t > H or w_t > W or h_t <= 0 or w_t <= 0:
        raise DimensionError(f"Thumbnail {h_t}x{w_t} must fit inside raster {H}x{W}")
    if H % h_t == 0 and W % w_t == 0:
        return Raster(box_downsample(raster.data, H // h_t, W // w_t), origin=raster.origin)
    ah = area_matrix(H, h_t)
    aw = area_matrix(W, w_t)
    return Raster(np.einsum("ih,chw,jw->cij", ah, raster.data, aw), origin=raster.origin)


def make_position_mask(p: PatchSpec, raster_hw: Tuple[int, int], thumb_hw: Tuple[int, int]) -> np.ndarray:
    """1 where a thumbnail pixel's source footprint touches the patch."""
    _check_bounds(p, raster_hw)
    H, W = raster_hw
    h_t, w_t = thumb_hw
    i = np.arange(h_t)
    j = np.arange(w_t)
    rows = (i * H < (p.row + p.h) * h_t) & ((i + 1) * H > p.row * h_t)
    cols = (j * W < (p.col + p.w) * w_t) & ((j + 1) * W > p.col * w_t)
    return (rows[:, None] & cols[None, :]).astype(np.uint8)


def stitch_probabilities(predictions: Sequence[Tuple[PatchSpec, np.ndarray]],
                         raster_hw: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Average ``(K, h, w)`` probability maps over every covering patch."""
    if not predictions:
        raise CoverageError("No predictions to stitch")
    if raster_hw is None:
        raster_hw = (max(p.row + p.h for p, _ in predictions), max(p.col + p.w for p, _ in predictions))
    H, W = raster_hw
    K = predictions[0][1].shape[0]
    total = np.zeros((K, H, W))
    count = np.zeros((H, W))
    for p, probs in predictions:
        if probs.shape != (K, p.h, p.w):
            raise ShapeError(f"Prediction shape {probs.shape} does not match patch {p}")
        total[:, p.row:p.row + p.h, p.col:p.col + p.w] += probs
        count[p.row:p.row + p.h, p.col:p.col + p.w] += 1
    if np.any(count == 0):
        missing = int(np.sum(count == 0))
        raise CoverageError(f"{missing} pixels are not covered by any prediction")
    return total / count


def stitch(predictions: Sequence[Tuple[PatchSpec, np.ndarray]],
           raster_hw: Optional[Tuple[int, int]] = None) -> LabelMask:
    return np.argmax(stitch_probabilities(predictions, raster_hw), axis=0).astype(np.int64)


def paint_patches(values: Sequence[Tuple[PatchSpec, int]], raster_hw: Tuple[int, int],
                  fill: int = 0) -> np.ndarray:
    """Paint one integer per patch footprint; later patches overwrite overlaps."""
    canvas = np.full(raster_hw, fill, dtype=np.int64)
    for p, value in values:
        canvas[p.row:p.row + p.h, p.col:p.col + p.w] = value
    return canvas


def extract_grid(raster: Raster, grid: TileGrid, max_workers: int = 1) -> List[Raster]:
    """Local crops for every patch, gathered in grid order."""
    if max_workers <= 1:
        return [extract_local(raster, p) for p in grid]
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        return list(executor.map(lambda p: extract_local(raster, p), grid.patches))
