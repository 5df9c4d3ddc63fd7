"""Atomic file output shared by every writer."""
from __future__ import annotations

import os
from pathlib import Path


def atomic_write(path: str | Path, payload: bytes) -> None:
    """Write to a sibling temp file, then rename over ``path``.

    Readers see either the old file or the complete new one, never a prefix.
    """
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    try:
        tmp.write_bytes(payload)
        tmp.replace(path)
    finally:
        if tmp.exists():
            tmp.unlink()
