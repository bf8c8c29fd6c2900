"""Tensor bundles, the QRB1 file format, deterministic RNG, and shared numerics.

A bundle is a named collection of dense row-major arrays (float32 for values,
int64 for labels) plus string-keyed metadata. The on-disk layout is

    magic "QRB1" | u64 LE manifest length | UTF-8 JSON manifest | payload

where the manifest is ``{"entries": [{name, dtype, shape, offset, byte_len}],
"meta": {...}}`` and offsets are relative to the payload start. Everything is
little-endian, so a file written on one platform reads identically on another.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    BadMagicError,
    ManifestError,
    NonFiniteError,
    ShapeMismatchError,
    TruncatedPayloadError,
    ZeroRowError,
)

MAGIC = b"QRB1"

_DTYPES = {
    "f32": np.dtype("<f4"),
    "i64": np.dtype("<i8"),
}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.int64): "i64"}

MetaValue = "str | int | float | bool"


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; equal seeds give equal streams everywhere."""
    return np.random.Generator(np.random.Philox(seed))


@dataclass
class TensorBundle:
    """Named arrays plus metadata; the universal exchange unit."""

    entries: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TensorBundle):
            return NotImplemented
        if self.meta != other.meta or self.entries.keys() != other.entries.keys():
            return False
        for name, arr in self.entries.items():
            o = other.entries[name]
            if arr.dtype != o.dtype or arr.shape != o.shape:
                return False
            if not np.array_equal(arr, o, equal_nan=True):
                return False
        return True

    def validate(self) -> None:
        for name, arr in self.entries.items():
            if not isinstance(name, str) or not name:
                raise ManifestError("entry names must be non-empty strings")
            if not isinstance(arr, np.ndarray):
                raise TypeError(f"entry {name!r} is not an ndarray")
            if arr.dtype not in _DTYPE_NAMES:
                raise TypeError(
                    f"entry {name!r} has dtype {arr.dtype}; only float32 and int64 are supported"
                )
        for key, value in self.meta.items():
            if not isinstance(key, str):
                raise ManifestError("meta keys must be strings")
            if not isinstance(value, (str, int, float, bool)):
                raise ManifestError(f"meta value for {key!r} must be a JSON scalar")


def write_bundle(bundle: TensorBundle, path, allow_nonfinite: bool = False) -> None:
    """Serialize ``bundle`` to ``path`` in the QRB1 format."""
    bundle.validate()
    entries = []
    blobs = []
    offset = 0
    for name, arr in bundle.entries.items():
        if arr.dtype == np.float32 and not allow_nonfinite and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"entry {name!r} contains non-finite values")
        data = np.ascontiguousarray(arr, dtype=_DTYPES[_DTYPE_NAMES[arr.dtype]]).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": _DTYPE_NAMES[arr.dtype],
                "shape": list(arr.shape),
                "offset": offset,
                "byte_len": len(data),
            }
        )
        blobs.append(data)
        offset += len(data)
    manifest = json.dumps({"entries": entries, "meta": bundle.meta}, separators=(",", ":"))
    raw = manifest.encode("utf-8")
    with open(path, "wb") as fp:
        fp.write(MAGIC)
        fp.write(len(raw).to_bytes(8, "little"))
        fp.write(raw)
        for blob in blobs:
            fp.write(blob)


def read_bundle(path) -> TensorBundle:
    """Exact inverse of :func:`write_bundle`."""
    with open(path, "rb") as fp:
        data = fp.read()
    if data[:4] != MAGIC:
        raise BadMagicError(f"{path}: expected magic {MAGIC!r}, got {data[:4]!r}")
    if len(data) < 12:
        raise TruncatedPayloadError(f"{path}: header shorter than 12 bytes")
    manifest_len = int.from_bytes(data[4:12], "little")
    if len(data) < 12 + manifest_len:
        raise TruncatedPayloadError(f"{path}: manifest truncated")
    try:
        manifest = json.loads(data[12 : 12 + manifest_len].decode("utf-8"))
        raw_entries = manifest["entries"]
        meta = manifest["meta"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise ManifestError(f"{path}: malformed manifest: {exc}") from exc
    payload = data[12 + manifest_len :]
    entries = {}
    for ent in raw_entries:
        try:
            name = ent["name"]
            dtype = _DTYPES[ent["dtype"]]
            shape = tuple(int(s) for s in ent["shape"])
            offset = int(ent["offset"])
            byte_len = int(ent["byte_len"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{path}: malformed entry record: {exc}") from exc
        expected = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if byte_len != expected:
            raise ShapeMismatchError(
                f"{path}: entry {name!r} declares {byte_len} bytes but shape {shape} needs {expected}"
            )
        if offset < 0 or offset + byte_len > len(payload):
            raise TruncatedPayloadError(
                f"{path}: entry {name!r} extends past end of payload"
            )
        arr = np.frombuffer(payload, dtype=dtype, count=byte_len // dtype.itemsize, offset=offset)
        entries[name] = arr.reshape(shape).copy()
    return TensorBundle(entries=entries, meta=meta)


def cosine_normalize(t: np.ndarray) -> np.ndarray:
    """L2-normalize every row of an [N, D] array; raises ZeroRowError on a zero row."""
    arr = np.asarray(t, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {arr.shape}")
    norms = np.linalg.norm(arr, axis=1)
    if np.any(norms == 0.0):
        row = int(np.flatnonzero(norms == 0.0)[0])
        raise ZeroRowError(f"row {row} has zero norm")
    return (arr / norms[:, None]).astype(np.float32)


def sha256_file(path) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as fp:
        for chunk in iter(lambda: fp.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
