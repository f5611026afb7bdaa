"""Versioned binary checkpoints with an integrity checksum.

Layout: 4-byte magic, 4-byte big-endian format version, 32-byte SHA-256 of
the payload, pickled payload. Loading verifies magic, version, and checksum
before any state is returned, so truncated or corrupted files never yield
partial state.
"""

from __future__ import annotations

import hashlib
import pickle
from pathlib import Path

MAGIC = b"SPCK"
FORMAT_VERSION = 1
_HEADER = len(MAGIC) + 4 + 32


class CheckpointError(RuntimeError):
    """Unreadable, corrupted, or version-incompatible checkpoint file."""


def save_checkpoint(payload: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = pickle.dumps(payload, protocol=4)
    digest = hashlib.sha256(blob).digest()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(FORMAT_VERSION.to_bytes(4, "big"))
        fh.write(digest)
        fh.write(blob)


def load_checkpoint(path) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")
    if len(raw) < _HEADER or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version = int.from_bytes(raw[len(MAGIC) : len(MAGIC) + 4], "big")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} unsupported (expected {FORMAT_VERSION})"
        )
    digest = raw[len(MAGIC) + 4 : _HEADER]
    blob = raw[_HEADER:]
    if hashlib.sha256(blob).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    return pickle.loads(blob)
