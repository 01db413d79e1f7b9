"""Parameter checkpoint files.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"PSASRCK\\0"
    8       4     uint32 format version (currently 1)
    12      4     uint32 header length H in bytes
    16      H     UTF-8 JSON header: {"meta": {...},
                      "tensors": [{"name", "shape", "dtype", "offset"}, ...]}
    16+H    ...   payload: raw little-endian scalars, tensors back to back

``offset`` is relative to the start of the payload; ``dtype`` is a numpy
dtype string such as ``"<f8"``. The JSON is written with sorted keys and no
whitespace so identical parameters produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"PSASRCK\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    index = []
    chunks = []
    offset = 0
    for name, arr in sorted(tensors.items()):
        a = np.asarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(a).tobytes()
        index.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str, "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": dict(meta or {}), "tensors": index},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(blob) < 16 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    payload = memoryview(blob)[16 + hlen:]
    out: dict[str, np.ndarray] = {}
    for ent in header["tensors"]:
        dt = np.dtype(ent["dtype"])
        n = int(np.prod(ent["shape"], dtype=np.int64))
        start, stop = ent["offset"], ent["offset"] + n * dt.itemsize
        if stop > len(payload):
            raise CheckpointError(f"{path}: truncated payload for {ent['name']}")
        out[ent["name"]] = np.frombuffer(payload[start:stop], dtype=dt).reshape(ent["shape"]).copy()
    return out, header["meta"]
