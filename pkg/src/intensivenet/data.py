"""Dataset ingestion: MNIST IDX parsing and synthetic digit-string lines."""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ctc

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
DATA_DIR_ENV = "INTENSIVENET_DATA"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataError(ValueError):
    """Base class for dataset problems."""


class IdxMagicError(DataError):
    pass


class IdxCountMismatchError(DataError):
    pass


class IdxTruncatedError(DataError):
    pass


class LineOverflowError(DataError):
    """Glyphs do not fit on the line canvas."""


@dataclass
class LabeledImage:
    image: np.ndarray  # (1, h, w, 1) in [0, 1]
    label: int | list[int]


@dataclass
class Dataset:
    """Images stacked as (n, h, w, c) with one label per image.

    Labels are an int array for classification and a list of digit lists for
    sequences.
    """

    images: np.ndarray
    labels: np.ndarray | list

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be (n, h, w, c), got {self.images.shape}")
        if len(self.labels) != self.images.shape[0]:
            raise DataError(f"{self.images.shape[0]} images but {len(self.labels)} labels")

    def __len__(self):
        return self.images.shape[0]

    @property
    def is_sequence(self) -> bool:
        return not isinstance(self.labels, np.ndarray)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        if self.is_sequence:
            return Dataset(self.images[idx], [list(self.labels[i]) for i in idx])
        return Dataset(self.images[idx], self.labels[idx])

    def items(self) -> list[LabeledImage]:
        out = []
        for i in range(len(self)):
            lab = list(self.labels[i]) if self.is_sequence else int(self.labels[i])
            out.append(LabeledImage(self.images[i:i + 1], lab))
        return out

    @classmethod
    def from_items(cls, items: Sequence[LabeledImage]) -> "Dataset":
        if not items:
            raise DataError("no items")
        images = np.concatenate([it.image for it in items], axis=0)
        if isinstance(items[0].label, (list, tuple)):
            return cls(images, [list(it.label) for it in items])
        return cls(images, np.array([it.label for it in items], dtype=np.int64))


# -- IDX -----------------------------------------------------------------------

def read_idx(path, magic: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: header needs {header} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = math.prod(dims)
    if len(raw) - header < size:
        raise IdxTruncatedError(f"{path}: payload has {len(raw) - header} bytes, dimensions need {size}")
    return dims, raw[header:header + size]


def load_mnist_arrays(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label pair into a :class:`Dataset` of (n, 28, 28, 1) images."""
    idims, ipayload = read_idx(images_path, IMAGE_MAGIC)
    ldims, lpayload = read_idx(labels_path, LABEL_MAGIC)
    if idims[0] != ldims[0]:
        raise IdxCountMismatchError(f"{idims[0]} images but {ldims[0]} labels")
    pixels = np.frombuffer(ipayload, dtype=np.uint8).reshape(idims[0], idims[1], idims[2], 1)
    labels = np.frombuffer(lpayload, dtype=np.uint8).astype(np.int64)
    return Dataset(pixels.astype(np.float64) / 255.0, labels)


def load_mnist_idx(images_path, labels_path) -> list[LabeledImage]:
    return load_mnist_arrays(images_path, labels_path).items()


def write_idx_images(path, images: np.ndarray) -> None:
    """Reference writer; ``images`` is (n, h, w) uint8."""
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    Path(path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, n, h, w) + images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", LABEL_MAGIC, labels.size) + labels.tobytes())


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "data/mnist"))


def load_mnist_split(split: str, data_dir=None) -> Dataset:
    """``split`` is ``train`` or ``test``; files are looked up under ``data_dir``."""
    base = Path(data_dir) if data_dir is not None else default_data_dir()
    images, labels = MNIST_FILES[split]
    return load_mnist_arrays(base / images, base / labels)


# -- synthetic digit lines -------------------------------------------------------

@dataclass(frozen=True)
class LineSpec:
    kmin: int = 3
    kmax: int = 6
    height: int = 32
    width: int = 200
    jitter: int = 2  # max extra pixels added to each inter-glyph gap
    gap: int = 1  # base gap between glyphs
    seed: int = 0

    def __post_init__(self):
        if self.kmin < 1 or self.kmax < self.kmin:
            raise DataError(f"need 1 <= kmin <= kmax, got [{self.kmin}, {self.kmax}]")
        if self.jitter < 0 or self.gap < 0:
            raise DataError("gap and jitter must be non-negative")
        if self.height < 1 or self.width < 1:
            raise DataError("canvas must be non-empty")


def resize_nearest(img: np.ndarray, height: int) -> np.ndarray:
    """Nearest-neighbour row resampling of an (h, w) glyph to ``height`` rows; width is scaled alike."""
    h, w = img.shape
    new_w = max(1, round(w * height / h))
    rows = (np.arange(height) * h) // height
    cols = (np.arange(new_w) * w) // new_w
    return img[rows][:, cols]


def tight_columns(img: np.ndarray) -> np.ndarray:
    """Drop empty leading and trailing columns; an empty glyph keeps one column."""
    ink = np.flatnonzero(img.max(axis=0) > 0)
    if ink.size == 0:
        return img[:, :1]
    return img[:, ink[0]:ink[-1] + 1]


def _group_glyphs(glyphs) -> list[list[np.ndarray]]:
    if isinstance(glyphs, Dataset):
        glyphs = glyphs.items()
    groups: list[list[np.ndarray]] = [[] for _ in range(10)]
    for item in glyphs:
        groups[int(item.label)].append(item.image[0, :, :, 0])
    for d, g in enumerate(groups):
        if not g:
            raise DataError(f"glyph source has no samples of digit {d}")
    return groups


def _compose_line(spec: LineSpec, groups, rng: np.random.Generator):
    k = int(rng.integers(spec.kmin, spec.kmax + 1))
    digits = [int(d) for d in rng.integers(0, 10, size=k)]
    canvas = np.zeros((spec.height, spec.width))
    x = 0
    for pos, d in enumerate(digits):
        pool = groups[d]
        glyph = tight_columns(resize_nearest(pool[int(rng.integers(len(pool)))], spec.height))
        if pos > 0:
            x += spec.gap + int(rng.integers(0, spec.jitter + 1))
        gw = glyph.shape[1]
        if x + gw > spec.width:
            raise LineOverflowError(f"{k} glyphs need more than {spec.width} columns")
        canvas[:, x:x + gw] = glyph
        x += gw
    return canvas, digits


def generate_lines(spec: LineSpec, glyph_source, count: int, frames: int | None = None) -> Dataset:
    """Compose ``count`` digit-string lines from MNIST glyphs.

    Each line draws K uniformly from ``[kmin, kmax]`` and K random digits.
    Every glyph is resized to the canvas height, cropped to its inked columns
    and placed left to right after a gap of ``gap + U{0..jitter}`` pixels
    (none before the first); the rest of the canvas stays zero. Line ``i``
    uses its own RNG stream derived from ``(seed, i)``.

    When ``frames`` is given, lines must be CTC-feasible in that many frames;
    the worst case ``2 * kmax - 1`` is checked up front.
    """
    if count < 1:
        raise DataError("count must be >= 1")
    if frames is not None and 2 * spec.kmax - 1 > frames:
        raise ctc.InfeasibleTargetError(frames, 2 * spec.kmax - 1)
    groups = _group_glyphs(glyph_source)
    images = np.zeros((count, spec.height, spec.width, 1))
    labels = []
    for i in range(count):
        canvas, digits = _compose_line(spec, groups, np.random.default_rng([spec.seed, i]))
        images[i, :, :, 0] = canvas
        labels.append(digits)
    return Dataset(images, labels)


def split(data: Dataset, ratio: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then the first ``floor(ratio * n)`` items form the training part."""
    if not 0.0 < ratio < 1.0:
        raise DataError(f"ratio must lie in (0, 1), got {ratio}")
    order = np.random.default_rng([seed]).permutation(len(data))
    cut = math.floor(ratio * len(data))
    return data.subset(order[:cut]), data.subset(order[cut:])


# -- persistence -------------------------------------------------------------------

def save_lines(path, data: Dataset) -> None:
    """Write ``<path>.json`` (index) and ``<path>.bin`` (little-endian float32 pixels)."""
    base = Path(path)
    n, h, w, _ = data.images.shape
    index = {"width": w, "height": h, "count": n, "labels": [list(map(int, l)) for l in data.labels]}
    base.with_suffix(".json").write_text(json.dumps(index), encoding="utf-8")
    base.with_suffix(".bin").write_bytes(data.images.astype("<f4").tobytes())


def load_lines(path) -> Dataset:
    base = Path(path)
    try:
        index = json.loads(base.with_suffix(".json").read_text(encoding="utf-8"))
        n, h, w = int(index["count"]), int(index["height"]), int(index["width"])
        labels = [list(map(int, l)) for l in index["labels"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{base}.json: malformed line index ({exc})") from exc
    raw = base.with_suffix(".bin").read_bytes()
    if len(raw) != n * h * w * 4:
        raise DataError(f"{base}.bin: {len(raw)} bytes, index implies {n * h * w * 4}")
    images = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(n, h, w, 1)
    return Dataset(images, labels)
