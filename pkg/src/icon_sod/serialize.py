"""Flat binary container for named arrays (checkpoints).

Byte layout, little-endian throughout:

    offset  size  content
    0       8     magic b"ICONSOD1"
    8       8     uint64: length L of the JSON index in bytes
    16      L     UTF-8 JSON index
    16+L    ...   raw array payloads, back to back

The JSON index is ``{"meta": {...}, "arrays": [...]}``; each array entry
has ``name``, ``dtype`` (numpy string form, e.g. "<f8"), ``shape`` and
``offset``/``nbytes`` relative to the start of the payload section.
Payloads are the raw C-order little-endian bytes of each array, so any
implementation can reload a checkpoint from this description alone.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"ICONSOD1"


def save_container(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    index = []
    offset = 0
    payloads = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        index.append(
            {
                "name": name,
                "dtype": le.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"meta": meta or {}, "arrays": index}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in payloads:
            fh.write(raw)


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint container (bad magic {magic!r})")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    return arrays, header.get("meta", {})
