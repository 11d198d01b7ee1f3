"""Versioned little-endian binary container shared by model, tensor and detector files.

Layout::

    magic (4 bytes) | version u16 | header length u32 | header (canonical JSON)
    | array count u32 | per array: element count u64, float64 little-endian data
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

FORMAT_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def encode(magic: bytes, header: dict, arrays) -> bytes:
    head = canonical_json(header).encode("ascii")
    parts = [magic, struct.pack("<HI", FORMAT_VERSION, len(head)), head, struct.pack("<I", len(arrays))]
    for a in arrays:
        flat = np.ascontiguousarray(a, dtype="<f8").ravel()
        parts.append(struct.pack("<Q", flat.size))
        parts.append(flat.tobytes())
    return b"".join(parts)


def decode(blob: bytes, magic: bytes) -> tuple[dict, list[np.ndarray]]:
    if len(blob) < 10 or blob[:4] != magic:
        raise FormatError(f"bad magic: expected {magic!r}, got {blob[:4]!r}")
    version, head_len = struct.unpack_from("<HI", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    pos = 10
    if pos + head_len + 4 > len(blob):
        raise FormatError("truncated header")
    try:
        header = json.loads(blob[pos:pos + head_len].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}") from exc
    pos += head_len
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    arrays = []
    for i in range(count):
        if pos + 8 > len(blob):
            raise FormatError(f"truncated before array {i}")
        (n,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        if pos + 8 * n > len(blob):
            raise FormatError(f"truncated inside array {i}")
        arrays.append(np.frombuffer(blob, dtype="<f8", count=n, offset=pos).astype(np.float64))
        pos += 8 * n
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes")
    return header, arrays


def write(path, magic: bytes, header: dict, arrays) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(magic, header, arrays))
    os.replace(tmp, path)
    return path


def read(path, magic: bytes) -> tuple[dict, list[np.ndarray]]:
    return decode(Path(path).read_bytes(), magic)


TENSOR_MAGIC = b"APCT"


def save_tensors(path, ids, tensors, extra: dict | None = None) -> Path:
    """Store a list of named tensors (e.g. adversarial inputs) in the shared container."""
    header = {"ids": list(ids), "shapes": [list(t.shape) for t in tensors], **(extra or {})}
    return write(path, TENSOR_MAGIC, header, tensors)


def load_tensors(path) -> tuple[list[str], list[np.ndarray], dict]:
    header, arrays = read(path, TENSOR_MAGIC)
    try:
        ids, shapes = header["ids"], header["shapes"]
        if not len(ids) == len(shapes) == len(arrays):
            raise FormatError("tensor count does not match header")
        tensors = [a.reshape(s) for a, s in zip(arrays, shapes)]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad tensor container header: {exc}") from exc
    return ids, tensors, header
