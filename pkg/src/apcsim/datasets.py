"""Dataset ingestion: MNIST IDX files, label-first CSV, and seeded Gaussian blobs."""
from __future__ import annotations

import csv
import gzip
import struct
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import FormatError
from .network import LabeledDataset
from .rng import SplitMix64

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

BLOB_MEANS = ((1.0, 3.0), (3.0, 1.0), (1.0, 1.0), (3.0, 3.0))


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse a big-endian IDX file (optionally gzip-compressed) into a uint8 array."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header at byte offset 0")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise FormatError(f"{path}: IDX magic 0x{magic:08x} at byte offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated IDX dimensions at byte offset 4")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    count = int(np.prod(dims)) if dims else 0
    if len(raw) != header_end + count:
        raise FormatError(f"{path}: expected {count} data bytes at byte offset {header_end}, "
                          f"found {len(raw) - header_end}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header_end).reshape(dims)


def write_idx(path, array: np.ndarray, compress: Optional[bool] = None) -> Path:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    blob = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    if compress:
        blob = gzip.compress(blob, mtime=0)
    path.write_bytes(blob)
    return path


def load_mnist_idx(images_path, labels_path, limit: Optional[int] = None) -> LabeledDataset:
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise FormatError(f"image/label files disagree: {images.shape} vs {labels.shape}")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    inputs = images[:, None, :, :].astype(np.float64) / 255.0
    return LabeledDataset(inputs, labels.astype(np.int64), 10)


def load_csv(path, input_shape: Optional[Sequence[int]] = None, class_count: Optional[int] = None,
             scale: float = 1.0) -> LabeledDataset:
    """Rows are ``label, v1, v2, ...``; values are multiplied by ``scale``."""
    rows = []
    labels = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise FormatError(f"{path}: no rows")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise FormatError(f"{path}: rows have differing lengths")
    inputs = np.array(rows) * scale
    if input_shape is not None:
        inputs = inputs.reshape((len(rows), *input_shape))
    labels_arr = np.array(labels, dtype=np.int64)
    return LabeledDataset(inputs, labels_arr, class_count or int(labels_arr.max()) + 1)


def make_blobs(n: int, sigma: float, seed: int, classes: int = 2) -> LabeledDataset:
    """Isotropic 2-D Gaussian classes centred on ``BLOB_MEANS``; labels cycle 0..classes-1.

    The means sit away from the origin so that perturbation-to-input norm ratios
    are informative.
    """
    if not 2 <= classes <= len(BLOB_MEANS):
        raise ValueError(f"classes must be in [2, {len(BLOB_MEANS)}]")
    rng = SplitMix64(seed)
    labels = np.arange(n) % classes
    means = np.array(BLOB_MEANS[:classes])[labels]
    points = means + sigma * rng.normal(2 * n).reshape(n, 2)
    return LabeledDataset(points, labels, classes)
