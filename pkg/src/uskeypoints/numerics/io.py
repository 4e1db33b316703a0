"""The ``.t32`` tensor container and a multi-tensor archive built on it.

Single tensor layout::

    b"UST1" | uint32 LE header length | UTF-8 JSON header | raw LE payload

with header ``{"dtype": "f32", "shape": [...], "order": "C"}``. The archive
(magic ``b"USTA"``) uses the same framing; its JSON header carries a manifest
and a table of named tensors with byte offsets into the payload.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Dict, Tuple

import numpy as np

MAGIC = b"UST1"
ARCHIVE_MAGIC = b"USTA"
_DTYPES = {"f32": "<f4", "f64": "<f8"}


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float64:
        return "f64"
    return "f32"


def encode_t32(arr) -> bytes:
    arr = np.asarray(arr)
    tag = _dtype_tag(arr)
    header = json.dumps({"dtype": tag, "shape": list(arr.shape), "order": "C"},
                        separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
    return MAGIC + struct.pack("<I", len(header)) + header + payload


def decode_t32(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise ValueError("not a .t32 tensor (bad magic)")
    (hlen,) = struct.unpack("<I", buf[4:8])
    header = json.loads(buf[8:8 + hlen].decode("utf-8"))
    if header.get("order", "C") != "C":
        raise ValueError("only C-order tensors are supported")
    dtype = np.dtype(_DTYPES[header["dtype"]])
    shape = tuple(header["shape"])
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=8 + hlen)
    return data.reshape(shape).astype(dtype.newbyteorder("="))


def save_t32(path, arr) -> None:
    _atomic_write(path, encode_t32(arr))


def load_t32(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_t32(fh.read())


def save_archive(path, tensors: Dict[str, np.ndarray], manifest: dict) -> None:
    table, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        table.append({"name": name, "dtype": tag, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"manifest": manifest, "tensors": table, "order": "C"},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    _atomic_write(path, ARCHIVE_MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks))


def load_archive(path) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != ARCHIVE_MAGIC:
        raise ValueError(f"{path}: not a tensor archive (bad magic)")
    (hlen,) = struct.unpack("<I", buf[4:8])
    header = json.loads(buf[8:8 + hlen].decode("utf-8"))
    base = 8 + hlen
    out = {}
    for entry in header["tensors"]:
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=base + entry["offset"])
        out[entry["name"]] = arr.reshape(shape).astype(dtype.newbyteorder("="))
    return out, header["manifest"]


def _atomic_write(path, data: bytes) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
