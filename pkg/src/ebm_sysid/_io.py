"""File and formatting helpers shared across the package."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path


def fmt17(x: float) -> str:
    """Decimal with 17 significant digits (round-trips float64)."""
    return f"{float(x):.17g}"


def atomic_write_text(path: str | Path, text: str):
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def worker_count() -> int:
    """Worker-thread cap from EBM_SYSID_THREADS (default: machine parallelism)."""
    raw = os.environ.get("EBM_SYSID_THREADS", "").strip()
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"EBM_SYSID_THREADS must be an integer, got {raw!r}") from None
        if n < 1:
            raise ValueError(f"EBM_SYSID_THREADS must be >= 1, got {n}")
        return n
    return os.cpu_count() or 1
