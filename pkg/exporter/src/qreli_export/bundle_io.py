"""Writer for the QRB1 tensor-bundle wire format.

Layout: magic "QRB1" | u64 LE manifest length | compact UTF-8 JSON manifest
{"entries": [{name, dtype, shape, offset, byte_len}], "meta": {...}} | payload
of little-endian row-major arrays, offsets relative to the payload start.
float32 carries values, int64 carries labels. This mirrors the consumer-side
format byte for byte so exported bundles load anywhere.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = b"QRB1"
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.int64): "i64"}
_WIRE_DTYPES = {"f32": "<f4", "i64": "<i8"}


def write_bundle(entries: dict, meta: dict, path) -> None:
    records = []
    blobs = []
    offset = 0
    for name, arr in entries.items():
        if not name or not isinstance(name, str):
            raise ValueError("entry names must be non-empty strings")
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_NAMES:
            raise TypeError(f"entry {name!r}: only float32 and int64 are exportable")
        if arr.dtype == np.float32 and not np.all(np.isfinite(arr)):
            raise ValueError(f"entry {name!r} contains non-finite values")
        dtype = _DTYPE_NAMES[arr.dtype]
        blob = np.ascontiguousarray(arr, dtype=_WIRE_DTYPES[dtype]).tobytes()
        records.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": list(arr.shape),
                "offset": offset,
                "byte_len": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"entries": records, "meta": meta}, separators=(",", ":"))
    raw = manifest.encode("utf-8")
    with open(path, "wb") as fp:
        fp.write(MAGIC)
        fp.write(len(raw).to_bytes(8, "little"))
        fp.write(raw)
        for blob in blobs:
            fp.write(blob)
