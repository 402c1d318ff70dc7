"""Checkpoint files: a JSON header with a named tensor table, then raw tensor bytes.

Layout::

    b"FORMACKP"            8-byte magic
    u32 version            little-endian
    u64 header_length
    header (UTF-8 JSON)    {"meta": {...}, "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}]}
    payload                tensors back to back, C order, little-endian
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"FORMACKP"
VERSION = 1


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": table}).encode()
    with path.open("wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[20:20 + hlen])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: corrupt header ({exc})") from exc
    body = raw[20 + hlen:]
    tensors = {}
    for rec in header["tensors"]:
        start, n = rec["offset"], rec["nbytes"]
        if start + n > len(body):
            raise DataError(f"{path}: tensor {rec['name']} runs past end of file")
        tensors[rec["name"]] = np.frombuffer(body[start:start + n], dtype=np.dtype(rec["dtype"])) \
            .reshape(rec["shape"]).copy()
    return tensors, header["meta"]
