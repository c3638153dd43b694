"""Binary checkpoint format.

Layout: a UTF-8 JSON header ending in a newline, an 8-byte little-endian
unsigned integer holding the header's byte length (newline included), then
the float32 little-endian payloads of every tensor in header order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import LoadError

_LEN = struct.Struct("<Q")


def save_tensors(path, tensors, meta=None):
    """Write a name -> array mapping (stored as float32)."""
    entries = {}
    payloads = []
    offset = 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f4"))
        entries[name] = {"shape": list(arr.shape), "offset": offset}
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode("utf-8") + b"\n"
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(_LEN.pack(len(header)))
        for chunk in payloads:
            fh.write(chunk)


def load_tensors(path):
    """Return ``(tensors, meta)``; arrays come back as float64."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    end = raw.find(b"\n")
    if end < 0 or len(raw) < end + 1 + _LEN.size:
        raise LoadError(f"{path}: truncated checkpoint header")
    header_len = end + 1
    (declared,) = _LEN.unpack_from(raw, header_len)
    if declared != header_len:
        raise LoadError(f"{path}: declared header length {declared} != actual {header_len}")
    try:
        header = json.loads(raw[:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"{path}: bad checkpoint header: {exc}") from exc
    body = memoryview(raw)[header_len + _LEN.size:]
    tensors = {}
    for name, entry in header["tensors"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        stop = start + 4 * count
        if stop > len(body):
            raise LoadError(f"{path}: payload for tensor {name!r} is truncated")
        arr = np.frombuffer(body[start:stop], dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float64)
    return tensors, header.get("meta", {})


def quantize(values):
    """Round float64 arrays to the nearest float32 value, as a save/load would."""
    return {name: np.asarray(v, dtype=np.float32).astype(np.float64) for name, v in values.items()}
