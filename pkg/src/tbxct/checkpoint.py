"""Single-file checkpoint format: a JSON header plus a raw float32 blob.

Layout: 4-byte little-endian header length, UTF-8 JSON header, then the
concatenated little-endian float32 tensors in header order. The header's
"tensors" entry records (name, shape) pairs so the blob is self-describing.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


def write_checkpoint(header: dict, tensors: dict[str, np.ndarray], path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header["tensors"] = [[name, list(arr.shape)] for name, arr in tensors.items()]
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def read_checkpoint(path: Path | str) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated checkpoint")
    (header_len,) = struct.unpack("<I", raw[:4])
    header = json.loads(raw[4 : 4 + header_len].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format_version {header.get('format_version')!r}")
    tensors: dict[str, np.ndarray] = {}
    offset = 4 + header_len
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(raw):
            raise ValueError(f"{path}: blob shorter than header promises")
        tensors[name] = np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape).copy()
        offset = end
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after tensors")
    return header, tensors
