"""Deterministic single-file container for named arrays.

Layout: one UTF-8 JSON header line (sorted keys) describing dtype, shape and
byte offsets per entry plus optional metadata, then the concatenated raw
little-endian array bytes. Unlike zip-based containers the output carries no
timestamps, so equal inputs produce byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = "matte-arrays/1"


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray],
                metadata: dict | None = None) -> None:
    entries = {}
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.hasobject:
            raise ValueError(f"array {name!r} has object dtype")
        dt = arr.dtype.newbyteorder("<")
        blob = arr.astype(dt, copy=False).tobytes()
        entries[name] = {
            "dtype": dt.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        }
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": MAGIC,
        "entries": entries,
        "metadata": metadata or {},
    }
    header_bytes = (json.dumps(header, sort_keys=True) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        header = json.loads(header_line.decode("utf-8"))
        if header.get("format") != MAGIC:
            raise ValueError(f"{path}: not a {MAGIC} container")
        payload = fh.read()
    arrays = {}
    for name, entry in header["entries"].items():
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
        arrays[name] = arr.reshape(entry["shape"]).copy()
    return arrays, header.get("metadata", {})
