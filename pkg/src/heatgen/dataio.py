"""Datasets, image emission, and the binary checkpoint container.

File formats owned here:

* IDX tensors (big-endian magic, dimension sizes, raw unsigned bytes) for
  digit corpora.
* 8-bit PNG for emitted samples, plus row-major montages.
* The ``IHDM`` checkpoint container: ASCII magic, little-endian u32 version,
  a length-prefixed JSON metadata block, then a table of named tensors, each
  carrying a CRC so corruption is detected instead of silently loaded.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


class DataIOError(Exception):
    """Base for everything this module can refuse to read or write."""


class IdxFormatError(DataIOError):
    pass


class ImageDirError(DataIOError):
    pass


class CheckpointError(DataIOError):
    pass


@dataclass
class Dataset:
    """An ordered stack of same-shaped images with values in [0, 1]."""

    images: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4:
            raise ValueError(f"expected (N, H, W, C), got shape {self.images.shape}")
        if self.images.shape[3] not in (1, 3):
            raise ValueError(f"channel count must be 1 or 3, got {self.images.shape[3]}")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> np.ndarray:
        return self.images[i]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def shuffled(self, seed: int) -> "Dataset":
        perm = np.random.default_rng(np.random.SeedSequence([int(seed)])).permutation(len(self))
        return Dataset(images=self.images[perm], source=self.source)


_IDX_IMAGES = 0x00000803
_IDX_LABELS = 0x00000801


def load_idx(path: str | Path):
    """Read an IDX file: image tensors become a Dataset, label vectors an array."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: only {len(raw)} bytes, no room for a magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == _IDX_IMAGES:
        if len(raw) < 16:
            raise IdxFormatError(f"{path}: header truncated at offset {len(raw)}")
        n, h, w = struct.unpack(">III", raw[4:16])
        expected = 16 + n * h * w
        if len(raw) != expected:
            raise IdxFormatError(
                f"{path}: payload truncated, expected {expected} bytes, got {len(raw)}"
            )
        pixels = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, h, w)
        return Dataset(images=pixels[:, :, :, None] / 255.0, source=str(path))
    if magic == _IDX_LABELS:
        if len(raw) < 8:
            raise IdxFormatError(f"{path}: header truncated at offset {len(raw)}")
        (n,) = struct.unpack(">I", raw[4:8])
        if len(raw) != 8 + n:
            raise IdxFormatError(
                f"{path}: payload truncated, expected {8 + n} bytes, got {len(raw)}"
            )
        return np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)
    raise IdxFormatError(f"{path}: bad magic 0x{magic:08x} at offset 0")


def write_idx(path: str | Path, array: np.ndarray) -> None:
    """Write a uint8 tensor as IDX: (N, H, W) as images, (N,) as labels."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError(f"IDX payload must be uint8, got {array.dtype}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if array.ndim == 3:
        header = struct.pack(">IIII", _IDX_IMAGES, *array.shape)
    elif array.ndim == 1:
        header = struct.pack(">II", _IDX_LABELS, array.shape[0])
    else:
        raise ValueError(f"can only write (N, H, W) or (N,), got shape {array.shape}")
    path.write_bytes(header + array.tobytes())


def load_image_dir(path: str | Path) -> Dataset:
    """Load every PNG under a directory, ordered by filename."""
    root = Path(path)
    if not root.is_dir():
        raise ImageDirError(f"{path} is not a directory")
    files = sorted(root.glob("*.png"))
    if not files:
        raise ImageDirError(f"no .png files under {path}")
    arrays, shapes = [], []
    for f in files:
        with Image.open(f) as img:
            img = img.convert("L") if img.mode in ("L", "I", "I;16", "1") else img.convert("RGB")
            a = np.asarray(img, dtype=np.float64) / 255.0
        if a.ndim == 2:
            a = a[:, :, None]
        arrays.append(a)
        shapes.append(a.shape)
    first = shapes[0]
    offenders = [f.name for f, s in zip(files, shapes) if s != first]
    if offenders:
        raise ImageDirError(
            f"{path}: images disagree with {files[0].name} {first}: {', '.join(offenders)}"
        )
    return Dataset(images=np.stack(arrays), source=str(root))


def save_png(image: np.ndarray, path: str | Path) -> None:
    """Emit one image as 8-bit PNG; values are clamped to [0, 1] here only."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, 1|3), got shape {image.shape}")
    byte = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    pil = Image.fromarray(byte[:, :, 0], mode="L") if byte.shape[2] == 1 else Image.fromarray(byte, mode="RGB")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pil.save(path)


def save_montage(images: np.ndarray, columns: int, path: str | Path) -> None:
    """Tile a stack row-major into one PNG; short last rows pad with black."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ValueError(f"expected (N, H, W, C), got shape {images.shape}")
    if columns < 1:
        raise ValueError(f"columns must be >= 1, got {columns}")
    n, h, w, c = images.shape
    if n == 0:
        raise ValueError("cannot tile an empty stack")
    rows = -(-n // columns)
    canvas = np.zeros((rows * h, columns * w, c))
    for i in range(n):
        r, col = divmod(i, columns)
        canvas[r * h : (r + 1) * h, col * w : (col + 1) * w] = images[i]
    save_png(canvas, path)


# --- checkpoint container ---------------------------------------------------

_MAGIC = b"IHDM"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {
    np.dtype("float32"): 1,
    np.dtype("float64"): 2,
    np.dtype("int64"): 3,
    np.dtype("uint8"): 4,
    np.dtype("int32"): 5,
}
_CODE_DTYPES = {code: dt for dt, code in _DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    """Everything needed to resume or evaluate a run.

    ``meta`` holds the JSON-safe state (resolved config, schedule bounds,
    step counter, RNG descriptor, optimizer scalars); ``tensors`` holds the
    named arrays (network weights, EMA shadow, Adam moments).
    """

    version: int = CHECKPOINT_VERSION
    meta: dict = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<I", ckpt.version)
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    blob += struct.pack("<Q", len(meta))
    blob += meta
    blob += struct.pack("<I", len(ckpt.tensors))
    for name in sorted(ckpt.tensors):
        # not ascontiguousarray: that would promote rank-0 tensors to rank 1
        arr = np.asarray(ckpt.tensors[name], order="C")
        if arr.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        name_b = name.encode()
        blob += struct.pack("<I", len(name_b))
        blob += name_b
        blob += struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blob += payload
        blob += struct.pack("<I", zlib.crc32(payload))
    path.write_bytes(bytes(blob))


class _Cursor:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(
                f"{self.path}: truncated while reading {what} at offset {self.pos}"
            )
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path: str | Path) -> Checkpoint:
    cur = _Cursor(Path(path).read_bytes(), path)
    magic = cur.take(4, "magic")
    if magic != _MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
    (version,) = cur.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported container version {version}, "
            f"this build reads version {CHECKPOINT_VERSION}"
        )
    (meta_len,) = cur.unpack("<Q", "metadata length")
    try:
        meta = json.loads(cur.take(meta_len, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: metadata block unreadable: {exc}") from exc
    (count,) = cur.unpack("<I", "record count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = cur.unpack("<I", f"record {i} name length")
        name = cur.take(name_len, f"record {i} name").decode()
        code, rank = cur.unpack("<BB", f"{name} dtype/rank")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        shape = cur.unpack(f"<{rank}Q", f"{name} dims") if rank else ()
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        payload = cur.take(nbytes, f"{name} payload")
        (crc,) = cur.unpack("<I", f"{name} checksum")
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"{path}: tensor {name!r} failed its checksum, file corrupt")
        tensors[name] = (
            np.frombuffer(payload, dtype=dtype.newbyteorder("<"))
            .reshape(shape)
            .astype(dtype)  # copy: frombuffer views are read-only
        )
    if cur.pos != len(cur.raw):
        raise CheckpointError(f"{path}: {len(cur.raw) - cur.pos} trailing bytes after last record")
    return Checkpoint(version=version, meta=meta, tensors=tensors)
