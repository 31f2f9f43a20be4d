"""Flat binary tensor files and named-tensor bundles.

``.tns``: magic ``TNS1``, u32 rank, u32 dims[], float32 little-endian
row-major payload. ``.tns`` bundles (checkpoints, statistical models):
magic ``TNB1``, u32 header length, UTF-8 JSON header with a ``tensors``
table of ``{name, dims}`` entries plus arbitrary metadata, then the
payloads concatenated in table order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC_TENSOR = b"TNS1"
MAGIC_BUNDLE = b"TNB1"


class TnsFormatError(ValueError):
    pass


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(MAGIC_TENSOR)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC_TENSOR:
        raise TnsFormatError(f"{path}: bad magic {data[:4]!r}")
    (rank,) = struct.unpack_from("<I", data, 4)
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    payload = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
    if payload.size != count:
        raise TnsFormatError(f"{path}: truncated payload")
    return payload.reshape(dims).copy()


def save_bundle(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float32 tensors plus a JSON metadata header."""
    table = []
    payloads = []
    for name, array in tensors.items():
        arr = np.ascontiguousarray(array, dtype=np.float32)
        table.append({"name": name, "dims": list(arr.shape)})
        payloads.append(arr.tobytes())
    header = {"tensors": table, "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC_BUNDLE)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for payload in payloads:
            fh.write(payload)


def load_bundle(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC_BUNDLE:
        raise TnsFormatError(f"{path}: bad magic {data[:4]!r}")
    (hlen,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8:8 + hlen].decode("utf-8"))
    offset = 8 + hlen
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        dims = tuple(entry["dims"])
        count = int(np.prod(dims)) if dims else 1
        payload = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        if payload.size != count:
            raise TnsFormatError(f"{path}: truncated payload for {entry['name']}")
        tensors[entry["name"]] = payload.reshape(dims).copy()
        offset += 4 * count
    return tensors, header["meta"]
