"""
Binary artifact formats.

GATN  raw tensor:   b"GATN" | u16 version | u8 dtype code | u8 ndim | ndim x u32 dims | payload
GACK  checkpoint:   b"GACK" | u16 version | u32 count | count x entry
      entry:        u16 name length | UTF-8 name | u8 ndim | ndim x u32 dims | f64 payload
PNM   P5 / P6 binary pixmaps with maxval 255.

Everything is little-endian and row-major.
"""

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from .exceptions import CheckpointError, FormatError

PathLike = Union[str, Path]

TENSOR_MAGIC = b"GATN"
CHECKPOINT_MAGIC = b"GACK"
FORMAT_VERSION = 1

DTYPE_CODES = {
    0: np.dtype("<u1"),
    1: np.dtype("<i4"),
    2: np.dtype("<i8"),
    3: np.dtype("<f4"),
    4: np.dtype("<f8"),
}


def _atomic_write(path: PathLike, payload: bytes) -> None:
    """Write bytes to a sibling temp file, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_bytes(path: PathLike) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise FormatError(f"Cannot read {path}: {e.strerror}") from e


# --- GATN ---

def encode_tensor(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    code = next((c for c, dt in DTYPE_CODES.items() if dt.kind == arr.dtype.kind
                 and dt.itemsize == arr.dtype.itemsize), None)
    if code is None:
        raise FormatError(f"Unsupported tensor dtype: {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError(f"Too many dimensions: {arr.ndim}")
    header = TENSOR_MAGIC + struct.pack("<HBB", FORMAT_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()


def decode_tensor(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 8 or blob[:4] != TENSOR_MAGIC:
        raise FormatError(f"{source}: not a GATN tensor file")
    version, code, ndim = struct.unpack_from("<HBB", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: unsupported GATN version {version}")
    if code not in DTYPE_CODES:
        raise FormatError(f"{source}: unknown dtype code {code}")
    offset = 8
    if len(blob) < offset + 4 * ndim:
        raise FormatError(f"{source}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", blob, offset)
    offset += 4 * ndim
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(blob) - offset != expected:
        raise FormatError(f"{source}: payload is {len(blob) - offset} bytes, expected {expected}")
    return np.frombuffer(blob, dtype=dtype, offset=offset).reshape(dims).copy()


def save_tensor(path: PathLike, array: np.ndarray) -> None:
    _atomic_write(path, encode_tensor(array))


def load_tensor(path: PathLike) -> np.ndarray:
    return decode_tensor(_read_bytes(path), str(path))


# --- GACK ---

def encode_checkpoint(params: Dict[str, np.ndarray]) -> bytes:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<HI", FORMAT_VERSION, len(params))]
    for name, value in params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> Dict[str, np.ndarray]:
    if len(blob) < 10 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: not a GACK checkpoint")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported GACK version {version}")
    offset = 10
    params: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            dims = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            size = int(np.prod(dims, dtype=np.int64)) * 8
            if offset + size > len(blob):
                raise CheckpointError(f"{source}: truncated payload for {name}")
            params[name] = np.frombuffer(blob, dtype="<f8", count=size // 8, offset=offset).reshape(dims).copy()
            offset += size
    except struct.error as e:
        raise CheckpointError(f"{source}: truncated checkpoint") from e
    if offset != len(blob):
        raise CheckpointError(f"{source}: {len(blob) - offset} trailing bytes")
    return params


def save_checkpoint(path: PathLike, params: Dict[str, np.ndarray]) -> None:
    _atomic_write(path, encode_checkpoint(params))


def load_checkpoint(path: PathLike) -> Dict[str, np.ndarray]:
    if not os.path.exists(path):
        raise CheckpointError(f"Checkpoint not found: {path}")
    with open(path, "rb") as f:
        return decode_checkpoint(f.read(), str(path))


# --- PNM ---

def encode_pnm(image: np.ndarray) -> bytes:
    """Encode a uint8 (H, W) or (3, H, W) array as P5 / P6."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        raise FormatError(f"PNM payload must be uint8, got {arr.dtype}")
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim == 2:
        h, w = arr.shape
        return f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()
    if arr.ndim == 3 and arr.shape[0] == 3:
        _, h, w = arr.shape
        return f"P6\n{w} {h}\n255\n".encode("ascii") + np.transpose(arr, (1, 2, 0)).tobytes()
    raise FormatError(f"PNM supports 1 or 3 channels, got shape {arr.shape}")


def _pnm_tokens(blob: bytes, count: int, source: str) -> Tuple[list, int]:
    tokens = []
    i = 0
    while len(tokens) < count:
        while i < len(blob) and blob[i:i + 1].isspace():
            i += 1
        if i < len(blob) and blob[i:i + 1] == b"#":
            while i < len(blob) and blob[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(blob) and not blob[i:i + 1].isspace():
            i += 1
        if start == i:
            raise FormatError(f"{source}: truncated PNM header")
        tokens.append(blob[start:i].decode("ascii"))
    # exactly one whitespace byte separates header from raster
    return tokens, i + 1


def decode_pnm(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    tokens, offset = _pnm_tokens(blob, 4, source)
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in ("P5", "P6"):
        raise FormatError(f"{source}: unsupported PNM magic {magic}")
    if maxval != 255:
        raise FormatError(f"{source}: only maxval 255 is supported")
    channels = 1 if magic == "P5" else 3
    expected = w * h * channels
    if len(blob) - offset != expected:
        raise FormatError(f"{source}: payload is {len(blob) - offset} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype=np.uint8, offset=offset)
    if channels == 1:
        return data.reshape(h, w).copy()
    return np.transpose(data.reshape(h, w, 3), (2, 0, 1)).copy()


def save_pnm(path: PathLike, image: np.ndarray) -> None:
    _atomic_write(path, encode_pnm(image))


def load_pnm(path: PathLike) -> np.ndarray:
    return decode_pnm(_read_bytes(path), str(path))


def load_array(path: PathLike) -> np.ndarray:
    """Load GATN or PNM, dispatching on magic bytes."""
    blob = _read_bytes(path)
    if blob[:4] == TENSOR_MAGIC:
        return decode_tensor(blob, str(path))
    if blob[:2] in (b"P5", b"P6"):
        return decode_pnm(blob, str(path))
    raise FormatError(f"{path}: unrecognised file format")


# --- JSON sidecars ---

def save_json(path: PathLike, payload) -> None:
    _atomic_write(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def load_json(path: PathLike):
    try:
        return json.loads(_read_bytes(path).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from e
