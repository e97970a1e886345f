"""Flat binary weights file with a JSON header.

Layout: ``b"GSMW"``, little-endian uint32 header length, UTF-8 JSON header,
then the float32 little-endian tensor data back to back. The header lists
every tensor's name, shape and byte offset plus free-form metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"GSMW"
VERSION = 1


class WeightsFormatError(ValueError):
    pass


def save_weights(path, state_dict: dict, meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, t in state_dict.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy().astype("<f4"))
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"version": VERSION, "dtype": "float32", "meta": meta or {},
                         "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<I", len(header)) + header)
        for c in chunks:
            f.write(c)


def load_weights(path) -> tuple[dict, dict]:
    """Return ``(state_dict, meta)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise WeightsFormatError(f"{path}: not a weights file")
    (n,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + n])
    if header.get("version") != VERSION:
        raise WeightsFormatError(f"{path}: unsupported version {header.get('version')}")
    base = 8 + n
    state = {}
    for e in header["tensors"]:
        buf = raw[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype="<f4").reshape(e["shape"]).copy()
        state[e["name"]] = torch.from_numpy(arr)
    return state, header["meta"]
