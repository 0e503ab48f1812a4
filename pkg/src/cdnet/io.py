"""Manifest-plus-payload container used for checkpoints and datasets.

Layout::

    CDNET-CONTAINER 1\\n
    <manifest length in bytes>\\n
    <manifest: UTF-8 JSON, sorted keys>
    <payload: arrays back to back, little-endian>

The manifest carries a free-form ``header`` object plus one entry per array
with its name, shape, dtype and byte offset into the payload.  Arrays are
written in the order given, so identical inputs give identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

MAGIC = b"CDNET-CONTAINER 1\n"
_ALLOWED = {"<f8", "<f4", "<i8", "<i4", "|i1"}


class FormatError(ValueError):
    pass


def encode(header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<").str
        if dt not in _ALLOWED:
            raise FormatError(f"array {name!r} has unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"header": header, "arrays": entries}, sort_keys=True, indent=1).encode()
    return MAGIC + f"{len(manifest)}\n".encode() + manifest + b"".join(chunks)


def decode(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if not blob.startswith(MAGIC):
        raise FormatError("not a cdnet container (bad magic)")
    rest = blob[len(MAGIC):]
    nl = rest.index(b"\n")
    n = int(rest[:nl])
    manifest = json.loads(rest[nl + 1 : nl + 1 + n])
    payload = memoryview(rest)[nl + 1 + n :]
    arrays = {}
    for e in manifest["arrays"]:
        if e["dtype"] not in _ALLOWED:
            raise FormatError(f"unsupported dtype {e['dtype']}")
        chunk = payload[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise FormatError(f"truncated payload for {e['name']!r}")
        arr = np.frombuffer(chunk, dtype=e["dtype"]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return manifest["header"], arrays


def save(path: str | os.PathLike, header: dict, arrays: dict[str, np.ndarray]) -> str:
    """Write atomically; returns the sha256 of the written bytes."""
    blob = encode(header, arrays)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def load(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


def digest(header: dict, arrays: dict[str, np.ndarray]) -> str:
    return hashlib.sha256(encode(header, arrays)).hexdigest()
