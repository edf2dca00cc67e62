"""Small shared helpers: seed derivation, canonical hashing, atomic writes."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np


def derive_seed(master: int, tag: str) -> int:
    """Stable 63-bit child seed from a master seed and a purpose tag."""
    digest = hashlib.sha256(f"{master}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def rng_for(master: int, tag: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, tag)))


def canonical_json(obj) -> str:
    """Deterministic JSON encoding: sorted keys, compact separators."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_of_json(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    """Write via a temp file in the target directory plus rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def format_sig(x: float, digits: int = 6) -> str:
    """Fixed significant-digit float formatting for CSV determinism."""
    if x != x:
        return "nan"
    return format(float(x), f".{digits}g")
