"""Named-tensor container shared by encoder, reducer and classifier files.

Layout (version 1)::

    SELFACT-PARAMS 1\\n
    <header length in bytes, decimal>\\n
    <header: UTF-8 JSON, sorted keys>
    <tensor payloads, little-endian float64, C order, concatenated>

The header holds ``kind`` (encoder | reducer | classifier), free-form
``meta`` and a ``tensors`` list of ``{"name", "shape", "offset"}`` entries
with offsets relative to the start of the payload section. Writing is
deterministic: the same tensors and metadata give the same bytes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"SELFACT-PARAMS"
VERSION = 1


def save(path, kind: str, tensors: dict, meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.array(tensors[name], dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "meta": meta or {}, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + b" %d\n" % VERSION)
        fh.write(b"%d\n" % len(header))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load(path, kind: str | None = None) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``; ``kind`` is checked when given."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"parameter file not found: {path}")
    data = path.read_bytes()
    try:
        first, rest = data.split(b"\n", 1)
        magic, version = first.split(b" ")
        hlen_raw, rest = rest.split(b"\n", 1)
        hlen = int(hlen_raw)
        header = json.loads(rest[:hlen])
    except (ValueError, json.JSONDecodeError):
        raise DataError(f"{path}: not a parameter container") from None
    if magic != MAGIC:
        raise DataError(f"{path}: not a parameter container")
    if int(version) != VERSION:
        raise DataError(f"{path}: unsupported container version {int(version)}")
    if kind is not None and header["kind"] != kind:
        raise DataError(f"{path}: holds a {header['kind']} model, expected {kind}")
    payload = rest[hlen:]
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start, stop = e["offset"], e["offset"] + 8 * count
        if stop > len(payload):
            raise DataError(f"{path}: truncated tensor {e['name']}")
        tensors[e["name"]] = np.frombuffer(payload[start:stop], dtype="<f8").reshape(tuple(e["shape"])).astype(float)
    return tensors, header["meta"]


def param_hash(tensors: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.array(tensors[name], dtype="<f8", order="C")
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
