"""Versioned checkpoint container ("fds-ckpt-v1").

A checkpoint is one file: a magic line, one canonical-JSON header line
describing metadata and the tensor index, then the raw little-endian tensor
blob. Byte-for-byte deterministic for identical contents, which the run
manifest relies on.
"""

from __future__ import annotations

import numpy as np

from .errors import FdsError
from .util import atomic_write_bytes, canonical_json

CKPT_FORMAT = "fds-ckpt-v1"
_MAGIC = b"fds-ckpt-v1\n"

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4"}


def save_checkpoint(path, meta: dict, tensors: dict) -> None:
    index = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype.name not in _DTYPES:
            raise FdsError(f"unsupported tensor dtype {arr.dtype} for {name!r}")
        data = arr.astype(_DTYPES[arr.dtype.name]).tobytes()
        index[name] = {"dtype": arr.dtype.name, "shape": list(arr.shape),
                       "offset": offset, "nbytes": len(data)}
        blobs.append(data)
        offset += len(data)
    header = canonical_json({"format": CKPT_FORMAT, "meta": meta, "tensors": index})
    atomic_write_bytes(path, _MAGIC + header.encode() + b"\n" + b"".join(blobs))


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.readline()
        if magic != _MAGIC:
            raise FdsError(f"{path} is not an {CKPT_FORMAT} checkpoint")
        import json
        header = json.loads(f.readline().decode())
        blob = f.read()
    if header.get("format") != CKPT_FORMAT:
        raise FdsError(f"unsupported checkpoint format {header.get('format')!r}")
    tensors = {}
    for name, spec in header["tensors"].items():
        raw = blob[spec["offset"]:spec["offset"] + spec["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[spec["dtype"]]).astype(spec["dtype"])
        tensors[name] = arr.reshape(spec["shape"]).copy()
    return header["meta"], tensors
