"""Binary checkpoint files.

Layout: magic ``PWCKPT`` + uint16 version + uint32 manifest length, a JSON
manifest (``{"meta": ..., "tensors": [{name, shape, dtype, offset, nbytes}]}``),
then the row-major little-endian arrays back to back. Optimizer moments go
to a sibling ``<path>.moments`` file in the same layout.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .optim import Adam
from .params import ParamStore

MAGIC = b"PWCKPT"
VERSION = 1


def write_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HI", VERSION, len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def read_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a pumpwatch checkpoint")
    version, mlen = struct.unpack_from("<HI", raw, len(MAGIC))
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + 6
    manifest = json.loads(raw[start : start + mlen])
    base = start + mlen
    arrays = {}
    for e in manifest["tensors"]:
        buf = raw[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
    return arrays, manifest["meta"]


def save_checkpoint(path: str | Path, params: ParamStore, optimizer: Adam | None = None, meta: dict | None = None) -> None:
    write_arrays(path, params.state(), meta)
    if optimizer is not None:
        moments = {f"m:{k}": a for k, a in optimizer.m.items()}
        moments.update({f"v:{k}": a for k, a in optimizer.v.items()})
        write_arrays(str(path) + ".moments", moments, {"step": optimizer.step_count})


def load_checkpoint(path: str | Path, params: ParamStore, optimizer: Adam | None = None) -> dict:
    arrays, meta = read_arrays(path)
    params.load_state(arrays)
    if optimizer is not None:
        moments, mmeta = read_arrays(str(path) + ".moments")
        optimizer.load_state(
            {
                "step": mmeta["step"],
                "m": {k[2:]: a for k, a in moments.items() if k.startswith("m:")},
                "v": {k[2:]: a for k, a in moments.items() if k.startswith("v:")},
            }
        )
    return meta
