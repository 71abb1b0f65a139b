"""Flat binary checkpoint container.

Layout::

    b"CADACKPT"  magic
    uint32       format version (little endian)
    uint64       header length in bytes
    header       UTF-8 JSON: {"meta": {...}, "entries": [[name, dtype, shape, offset, nbytes], ...]}
    payload      concatenated little-endian arrays in entry order

The header is written with sorted keys and no whitespace, so saving what was
loaded reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"CADACKPT"
VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


def _code(arr: np.ndarray) -> str:
    if arr.dtype.kind == "f":
        return "f8" if arr.dtype.itemsize == 8 else "f4"
    if arr.dtype.kind in "iu":
        return "i8"
    raise TypeError(f"unsupported checkpoint dtype {arr.dtype}")


def save_checkpoint(path: str | os.PathLike, arrays: "dict[str, np.ndarray]", meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        code = _code(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append([name, code, list(arr.shape), offset, len(raw)])
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "entries": entries}, sort_keys=True,
                        separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen])
    base = 20 + hlen
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, code, shape, offset, nbytes in header["entries"]:
        buf = data[base + offset: base + offset + nbytes]
        arrays[name] = np.frombuffer(buf, dtype=_DTYPES[code]).reshape(shape).copy()
    return header["meta"], arrays


def namespaced(prefix: str, arrays: dict) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((f"{prefix}/{k}", v) for k, v in arrays.items())


def strip(prefix: str, arrays: dict) -> "OrderedDict[str, np.ndarray]":
    p = prefix + "/"
    return OrderedDict((k[len(p):], v) for k, v in arrays.items() if k.startswith(p))
