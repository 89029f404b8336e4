"""Deterministic binary container: a JSON header plus raw little-endian arrays.

Used for model checkpoints and training state.  Unlike zip-based formats the
byte stream depends only on the content, so identical state always produces
identical files.
"""

from __future__ import annotations

import json
import struct
from typing import Mapping

import numpy as np

from .errors import ParseError

MAGIC = b"MUTEASR1\n"

_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


def write_container(path: str, meta: Mapping, arrays: Mapping[str, np.ndarray]) -> None:
    index = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8", copy=False)
        elif arr.dtype.kind in "iub":
            arr = arr.astype("<i8", copy=False)
        else:
            raise ParseError(f"unsupported array dtype {arr.dtype} for {name!r}")
        raw = arr.tobytes()
        index.append(
            {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": dict(meta), "arrays": index}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_container(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ParseError(f"{path}: not a muteasr checkpoint (bad magic)")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        payload = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise ParseError(f"{path}: unknown dtype {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=start).reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64 if dtype.kind == "f" else np.int64)
    return header["meta"], arrays
