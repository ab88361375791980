"""Single-file binary checkpoints.

Layout::

    b"CMF1"
    uint32 LE      manifest length in bytes
    manifest       UTF-8 JSON: {"meta": {...}, "tensors": [{name, dtype, shape}, ...]}
    buffers        raw little-endian data, one per manifest entry, in order

Names are slash-namespaced (``backbone/conv1/w``). Round-trips are bit-exact.
"""
from __future__ import annotations

import json
import os
import struct
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np

MAGIC = b"CMF1"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint8": "u1"}


class CheckpointError(Exception):
    pass


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Optional[Mapping[str, Any]] = None) -> None:
    entries = []
    buffers = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dname = arr.dtype.name
        if dname not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {dname}")
        entries.append({"name": name, "dtype": dname, "shape": list(arr.shape)})
        buffers.append(np.ascontiguousarray(arr, dtype=_DTYPES[dname]).tobytes())
    manifest = json.dumps({"meta": dict(meta or {}), "tensors": entries}, sort_keys=True).encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for buf in buffers:
            fh.write(buf)
    os.replace(tmp, path)


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {blob[:4]!r})")
    (mlen,) = struct.unpack("<I", blob[4:8])
    manifest = json.loads(blob[8 : 8 + mlen].decode("utf-8"))
    offset = 8 + mlen
    tensors: Dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        dt = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated buffer for {entry['name']}")
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=offset).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(entry["dtype"], copy=True)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return tensors, manifest["meta"]


def namespace(tensors: Mapping[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    """Entries under ``prefix/`` with the prefix stripped."""
    p = prefix.rstrip("/") + "/"
    return {k[len(p) :]: v for k, v in tensors.items() if k.startswith(p)}


def prefixed(tensors: Mapping[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    p = prefix.rstrip("/") + "/"
    return {p + k: v for k, v in tensors.items()}
