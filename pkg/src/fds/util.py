"""Shared plumbing: seed derivation, hashing, canonical JSON, atomic file writes."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

MASK63 = (1 << 63) - 1


def canonical_json(obj) -> str:
    """Stable JSON encoding used for hashing and for every persisted artifact."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def derive_seed(*parts) -> int:
    """Fold an arbitrary key path into a 63-bit seed, deterministically."""
    digest = hashlib.sha256(canonical_json(list(map(str, parts))).encode()).digest()
    return int.from_bytes(digest[:8], "little") & MASK63


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_bytes(path, data: bytes) -> None:
    """Write-temp-then-rename so concurrent readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path, obj) -> None:
    atomic_write_text(path, canonical_json(obj) + "\n")


def load_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
