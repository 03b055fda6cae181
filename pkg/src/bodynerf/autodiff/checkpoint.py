"""Binary parameter container: JSON index header + raw little-endian float64.

Round-trips are bit-exact. The header's "meta" field carries arbitrary
JSON-serializable run state (optimizer step, RNG state, config snapshot).
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"BNCKPT1\n"


def save_arrays(path, arrays, meta=None):
    """Write {name: float64 array} plus optional JSON-able meta."""
    index = {}
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8", order="C")
        index[name] = {"shape": list(a.shape), "offset": offset}
        blob = a.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"arrays": index, "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_arrays(path):
    """Read a container; returns (arrays dict, meta dict)."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a parameter container")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    arrays = {}
    for name, entry in header["arrays"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        arrays[name] = arr.reshape(shape).astype(np.float64)
    return arrays, header.get("meta", {})
