"""Versioned binary checkpoint container.

Byte layout (all integers little-endian):

    offset 0   magic bytes  b"DMDK"
    offset 4   uint32       format version (currently 1)
    offset 8   uint64       header length H in bytes
    offset 16  H bytes      UTF-8 JSON header
    offset 16+H             payload: tensors concatenated, row-major float64 LE

The JSON header is ``{"meta": {...}, "tensors": [{"name", "rows", "cols",
"offset"}, ...]}`` where each ``offset`` is relative to the payload start.
Serialization is canonical (sorted keys, fixed separators), so identical
models produce byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DMDK"
VERSION = 1


def save_checkpoint(
    path: str | Path, tensors: list[tuple[str, np.ndarray]], meta: dict
) -> None:
    manifest = []
    offset = 0
    blobs = []
    seen = set()
    for name, arr in tensors:
        if name in seen:
            raise ValueError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.ascontiguousarray(arr, dtype="<f8")
        if arr.ndim != 2:
            raise ValueError(f"tensor {name!r} must be 2-D, got ndim={arr.ndim}")
        manifest.append(
            {"name": name, "rows": int(arr.shape[0]), "cols": int(arr.shape[1]), "offset": offset}
        )
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    header = json.dumps(
        {"meta": meta, "tensors": manifest}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 16 or data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<Q", data, 8)
    header_end = 16 + header_len
    if header_end > len(data):
        raise ValueError(f"{path}: truncated header")
    try:
        header = json.loads(data[16:header_end].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ValueError(f"{path}: malformed checkpoint header: {e}") from None
    payload = data[header_end:]
    tensors: dict[str, np.ndarray] = {}
    for item in header.get("tensors", []):
        name, rows, cols, offset = item["name"], item["rows"], item["cols"], item["offset"]
        nbytes = rows * cols * 8
        if offset + nbytes > len(payload):
            raise ValueError(f"{path}: tensor {name!r} extends past end of file")
        arr = np.frombuffer(payload, dtype="<f8", count=rows * cols, offset=offset)
        tensors[name] = arr.reshape(rows, cols).astype(np.float64)
    return tensors, header.get("meta", {})
