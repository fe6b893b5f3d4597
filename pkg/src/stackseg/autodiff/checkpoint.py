"""Single-file model checkpoints.

Layout: an ASCII line ``VCKPT1 <manifest bytes>``, then a JSON manifest (layer
names, shapes, byte offsets, hyperparameters), then the raw little-endian f64
payloads in manifest order. The manifest is written with sorted keys so equal
models give equal bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import FormatError

_MAGIC = "VCKPT1"


def dumps(params: dict, hyper: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in params.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunk = a.tobytes()
        chunks.append(chunk)
        offset += len(chunk)
    manifest = json.dumps({"hyperparameters": hyper or {}, "tensors": entries}, sort_keys=True).encode()
    return f"{_MAGIC} {len(manifest)}\n".encode() + manifest + b"".join(chunks)


def loads(raw: bytes):
    nl = raw.find(b"\n")
    head = raw[:nl].decode("ascii", "replace").split() if nl > 0 else []
    if len(head) != 2 or head[0] != _MAGIC:
        raise FormatError("not a checkpoint")
    mlen = int(head[1])
    manifest = json.loads(raw[nl + 1:nl + 1 + mlen])
    payload = raw[nl + 1 + mlen:]
    params = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"])
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return params, manifest["hyperparameters"]


def save(path, params: dict, hyper: dict | None = None) -> None:
    Path(path).write_bytes(dumps(params, hyper))


def load(path):
    return loads(Path(path).read_bytes())
