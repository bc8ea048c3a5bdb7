"""Shared utilities: seed derivation, hashing and canonical JSON."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Any

import numpy as np

_FLOAT_DIGITS = 10
_UINT64_MASK = (1 << 64) - 1


def derive_seed(master_seed: int, *parts: object) -> int:
    """
    Derive a 64-bit seed from a master seed and any number of labels.

    Example:
        derive_seed(42, "train", 3, 0)  # per-sample, per-attempt seed
    """
    key = ":".join(str(p) for p in (master_seed, *parts))
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & _UINT64_MASK


def _canonicalize(value: Any) -> Any:
    if isinstance(value, float):
        if not math.isfinite(value):
            return str(value)
        return float(f"{value:.{_FLOAT_DIGITS}g}")
    if isinstance(value, (np.floating,)):
        return _canonicalize(float(value))
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, dict):
        return {str(k): _canonicalize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_canonicalize(v) for v in value]
    if isinstance(value, Path):
        return value.as_posix()
    return value


def canonical_json(data: Any) -> str:
    """Serialize with sorted keys and fixed float formatting so equal data gives equal bytes."""
    return json.dumps(_canonicalize(data), sort_keys=True, indent=2) + "\n"


def write_canonical_json(path: Path, data: Any) -> None:
    """Write canonical JSON, creating parent directories."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(data), encoding="utf-8")


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()
