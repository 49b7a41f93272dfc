"""
Procedural scale-ambiguous scenes.

Ponds and lakes share one water texture; only the blob's extent decides the
class: a water blob whose bounding box fits inside ``patch_hint x patch_hint``
is a pond, anything larger is a lake. Built-up rectangles have their own
texture and are identifiable from a single patch.
"""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy import ndimage

from .exceptions import DatasetError, FormatError, GenerationError
from .formats import load_tensor, save_tensor
from .rng import named_stream
from .tiling import Raster

logger = logging.getLogger(__name__)

BACKGROUND, POND, LAKE, BUILT = 0, 1, 2, 3
CLASS_NAMES = ("background", "pond", "lake", "built")

TEXTURES = {
    "background": np.array([0.45, 0.55, 0.30]),
    "water": np.array([0.15, 0.30, 0.55]),
    "built": np.array([0.75, 0.70, 0.65]),
}

MANIFEST_HEADER = ["id", "raster", "label", "seed"]


def texture_contrast() -> float:
    """Smallest per-channel max difference between any two texture families."""
    return float(min(np.abs(a - b).max() for a, b in combinations(TEXTURES.values(), 2)))


class SceneConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    height: int = 512
    width: int = 512
    patch_hint: int = 64
    pond_count: Tuple[int, int] = (2, 4)
    lake_count: Tuple[int, int] = (1, 2)
    built_count: Tuple[int, int] = (2, 5)
    noise: float = 0.1
    seed: int = 0
    max_retries: int = 200
    margin: int = 4

    @field_validator("pond_count", "lake_count", "built_count")
    @classmethod
    def validate_range(cls, v):
        lo, hi = v
        if lo < 0 or hi < lo:
            raise ValueError(f"count range must satisfy 0 <= min <= max, got {v}")
        return v

    @field_validator("noise")
    @classmethod
    def validate_noise(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("noise must be in [0, 1]")
        if v >= texture_contrast():
            raise ValueError(f"noise must be below the texture contrast {texture_contrast():.2f}")
        return v

    @field_validator("seed")
    @classmethod
    def validate_seed(cls, v):
        if not 0 <= v < 2 ** 64:
            raise ValueError("seed must fit in u64")
        return v

    @model_validator(mode="after")
    def validate_extent(self):
        if self.patch_hint < 4:
            raise ValueError("patch_hint must be >= 4")
        if self.height < 4 * self.patch_hint or self.width < 4 * self.patch_hint:
            raise ValueError("height and width must be at least 4 * patch_hint")
        return self


@dataclass
class Blob:
    cls: int
    shape: str
    row: int
    col: int
    h: int
    w: int


@dataclass
class ManifestEntry:
    id: str
    raster: str
    label: str
    seed: int


@dataclass
class Manifest:
    path: Path
    entries: List[ManifestEntry] = field(default_factory=list)

    @property
    def root(self) -> Path:
        return self.path.parent

    def __len__(self) -> int:
        return len(self.entries)

    def load(self, index: int) -> Tuple[Raster, np.ndarray]:
        entry = self.entries[index]
        try:
            raster = Raster(load_tensor(self.root / entry.raster))
            labels = load_tensor(self.root / entry.label).astype(np.int64)
        except FormatError as e:
            raise DatasetError(f"Cannot load scene {entry.id}: {e}") from e
        return raster, labels


def _blob_mask(shape: str, h: int, w: int) -> np.ndarray:
    if shape == "rect":
        return np.ones((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    return ((yy - cy) / (h / 2.0)) ** 2 + ((xx - cx) / (w / 2.0)) ** 2 <= 1.0


def _overlaps(box: Tuple[int, int, int, int], placed: List[Blob], margin: int) -> bool:
    r, c, h, w = box
    for b in placed:
        if (r < b.row + b.h + margin and b.row < r + h + margin
                and c < b.col + b.w + margin and b.col < c + w + margin):
            return True
    return False


def _place(rng: np.random.Generator, cfg: SceneConfig, placed: List[Blob], cls: int,
           size_range: Tuple[int, int], shapes: Tuple[str, ...]) -> Blob:
    lo, hi = size_range
    for _ in range(cfg.max_retries):
        h = int(rng.integers(lo, hi + 1))
        w = int(rng.integers(lo, hi + 1))
        if h > cfg.height or w > cfg.width:
            continue
        r = int(rng.integers(0, cfg.height - h + 1))
        c = int(rng.integers(0, cfg.width - w + 1))
        if not _overlaps((r, c, h, w), placed, cfg.margin):
            shape = shapes[int(rng.integers(len(shapes)))]
            return Blob(cls=cls, shape=shape, row=r, col=c, h=h, w=w)
    raise GenerationError(
        f"Could not place a {CLASS_NAMES[cls]} blob after {cfg.max_retries} attempts (seed {cfg.seed})")


def classify_water(h: int, w: int, patch_hint: int) -> int:
    return POND if h <= patch_hint and w <= patch_hint else LAKE


def generate_scene(cfg: SceneConfig) -> Tuple[Raster, np.ndarray]:
    """Deterministic (raster, labels) pair for ``cfg.seed``."""
    raster, labels, _ = generate_scene_with_blobs(cfg)
    return raster, labels


def generate_scene_with_blobs(cfg: SceneConfig) -> Tuple[Raster, np.ndarray, List[Blob]]:
    rng = named_stream(cfg.seed, "synthgeo.scene")
    ph = cfg.patch_hint
    placed: List[Blob] = []
    n_lakes = int(rng.integers(cfg.lake_count[0], cfg.lake_count[1] + 1))
    n_ponds = int(rng.integers(cfg.pond_count[0], cfg.pond_count[1] + 1))
    n_built = int(rng.integers(cfg.built_count[0], cfg.built_count[1] + 1))
    lake_hi = min(3 * ph, min(cfg.height, cfg.width) // 2)
    for _ in range(n_lakes):
        placed.append(_place(rng, cfg, placed, LAKE, (ph + ph // 2, lake_hi), ("ellipse", "rect")))
    for _ in range(n_ponds):
        placed.append(_place(rng, cfg, placed, POND, (max(2, ph // 4), (3 * ph) // 4), ("ellipse", "rect")))
    for _ in range(n_built):
        placed.append(_place(rng, cfg, placed, BUILT, (max(2, ph // 4), ph), ("rect",)))

    labels = np.full((cfg.height, cfg.width), BACKGROUND, dtype=np.int64)
    family = np.zeros((cfg.height, cfg.width), dtype=np.int64)
    blobs: List[Blob] = []
    for blob in placed:
        mask = _blob_mask(blob.shape, blob.h, blob.w)
        rows, cols = np.nonzero(mask)
        # label from the rasterised footprint, not the sampled box
        h = int(rows.max() - rows.min() + 1)
        w = int(cols.max() - cols.min() + 1)
        cls = BUILT if blob.cls == BUILT else classify_water(h, w, ph)
        region = (slice(blob.row, blob.row + blob.h), slice(blob.col, blob.col + blob.w))
        labels[region][mask] = cls
        family[region][mask] = 2 if cls == BUILT else 1
        blobs.append(Blob(cls=cls, shape=blob.shape, row=blob.row + int(rows.min()),
                          col=blob.col + int(cols.min()), h=h, w=w))

    bases = np.stack([TEXTURES["background"], TEXTURES["water"], TEXTURES["built"]])
    data = np.transpose(bases[family], (2, 0, 1))
    half = cfg.noise / 2.0
    data = data + rng.uniform(-half, half, size=data.shape)
    data = np.clip(data, 0.0, 1.0)
    logger.debug("scene seed=%d: %d lakes, %d ponds, %d built", cfg.seed, n_lakes, n_ponds, n_built)
    return Raster(data), labels, blobs


def oracle_labels(labels: np.ndarray, patch_hint: int) -> np.ndarray:
    """Recover pond/lake labels from the water mask alone using the size rule."""
    water = (labels == POND) | (labels == LAKE)
    components, count = ndimage.label(water)
    out = np.where(labels == BUILT, BUILT, BACKGROUND).astype(np.int64)
    for index, box in enumerate(ndimage.find_objects(components), start=1):
        if box is None:
            continue
        h = box[0].stop - box[0].start
        w = box[1].stop - box[1].start
        out[components == index] = classify_water(h, w, patch_hint)
    return out


def scene_seed(base_seed: int, index: int) -> int:
    return int(named_stream(base_seed, f"synthgeo.dataset.{index}").integers(0, 2 ** 63))


def split_seed(base_seed: int, split: str) -> int:
    """Base seed of a dataset split, so train and test scenes never coincide."""
    return int(named_stream(base_seed, f"synthgeo.split.{split}").integers(0, 2 ** 63))


def scene_stats(labels: np.ndarray, blobs: List[Blob]) -> Dict:
    counts = np.bincount(labels.ravel(), minlength=len(CLASS_NAMES))
    return {
        "class_fraction": {name: float(counts[i] / labels.size) for i, name in enumerate(CLASS_NAMES)},
        "blob_count": {name: sum(1 for b in blobs if b.cls == i) for i, name in enumerate(CLASS_NAMES) if i},
    }


def _write_scene(args) -> Dict:
    cfg, out_dir, scene_id = args
    raster, labels, blobs = generate_scene_with_blobs(cfg)
    raster_name = f"{scene_id}.raster.gatn"
    label_name = f"{scene_id}.label.gatn"
    try:
        save_tensor(out_dir / raster_name, raster.data)
        save_tensor(out_dir / label_name, labels.astype(np.uint8))
    except OSError as e:
        raise DatasetError(f"Cannot write scene {scene_id} to {out_dir}: {e}") from e
    return {"id": scene_id, "raster": raster_name, "label": label_name, "seed": cfg.seed,
            "stats": scene_stats(labels, blobs)}


def generate_dataset(cfg: SceneConfig, n_scenes: int, out_dir, workers: int = 1) -> Manifest:
    """Write ``n_scenes`` scene pairs plus ``manifest.tsv`` into ``out_dir``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"Cannot create {out_dir}: {e}") from e
    jobs = [(cfg.model_copy(update={"seed": scene_seed(cfg.seed, i)}), out_dir, f"scene_{i:04d}")
            for i in range(n_scenes)]
    if workers > 1 and n_scenes > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            rows = list(executor.map(_write_scene, jobs))
    else:
        rows = [_write_scene(job) for job in jobs]

    manifest_path = out_dir / "manifest.tsv"
    frame = pd.DataFrame([{k: r[k] for k in MANIFEST_HEADER} for r in rows], columns=MANIFEST_HEADER)
    try:
        frame.to_csv(manifest_path, sep="\t", index=False, lineterminator="\n", encoding="utf-8")
        if rows:
            with open(out_dir / "dataset.json", "w", encoding="utf-8") as f:
                json.dump({"config": cfg.model_dump(mode="json"),
                           "scenes": {r["id"]: r["stats"] for r in rows}}, f, indent=2, sort_keys=True)
    except OSError as e:
        raise DatasetError(f"Cannot write manifest {manifest_path}: {e}") from e
    logger.info("wrote %d scenes to %s", n_scenes, out_dir)
    return load_manifest(manifest_path)


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"Manifest not found: {path}")
    try:
        frame = pd.read_csv(path, sep="\t", dtype={"id": str, "raster": str, "label": str, "seed": "uint64"},
                            encoding="utf-8")
    except (OSError, ValueError, pd.errors.ParserError) as e:
        raise DatasetError(f"Cannot parse manifest {path}: {e}") from e
    if list(frame.columns) != MANIFEST_HEADER:
        raise DatasetError(f"{path}: expected header {MANIFEST_HEADER}, got {list(frame.columns)}")
    entries = [ManifestEntry(id=r.id, raster=r.raster, label=r.label, seed=int(r.seed))
               for r in frame.itertuples(index=False)]
    return Manifest(path=path, entries=entries)
