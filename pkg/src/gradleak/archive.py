"""GVT1 tensor archives.

Layout::

    b"GVTENS01"                      8-byte magic
    uint32 little-endian             header length in bytes
    UTF-8 JSON header                {"entries": [...], "meta": {...}}
    payloads                         raw little-endian row-major arrays

Each entry is ``{"name", "dtype": "f32"|"f64", "shape", "offset", "len"}``
with ``offset`` counted from the first payload byte and ``len`` in bytes.
``meta`` is optional free-form JSON.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import ContractError

MAGIC = b"GVTENS01"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def encode(arrays: Mapping[str, np.ndarray], meta: dict | None = None, dtype: str = "f64") -> bytes:
    if dtype not in _DTYPES:
        raise ContractError(f"unsupported archive dtype {dtype!r}")
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        payload = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "len": len(payload)})
        chunks.append(payload)
        offset += len(payload)
    header = {"entries": entries}
    if meta is not None:
        header["meta"] = meta
    hbytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(chunks)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise ContractError("not a GVT1 archive (bad magic)")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    base = 12 + hlen
    out: dict[str, np.ndarray] = {}
    for e in header["entries"]:
        dt = _DTYPES.get(e["dtype"])
        if dt is None:
            raise ContractError(f"entry {e['name']!r}: unsupported dtype {e['dtype']!r}")
        start = base + e["offset"]
        raw = blob[start : start + e["len"]]
        if len(raw) != e["len"] or e["len"] != dt.itemsize * int(np.prod(e["shape"], dtype=np.int64)):
            raise ContractError(f"entry {e['name']!r}: truncated or inconsistent payload")
        out[e["name"]] = np.frombuffer(raw, dtype=dt).reshape(e["shape"]).copy()
    return out, header.get("meta", {})


def save(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None, dtype: str = "f64") -> Path:
    path = Path(path)
    path.write_bytes(encode(arrays, meta, dtype))
    return path


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())
