"""Small shared helpers: hashing, seeding, atomic writes."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import tempfile
from fractions import Fraction
from pathlib import Path
from typing import Any

import numpy as np


def _jsonable(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return _jsonable(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def canonical_json(obj: Any) -> str:
    """JSON with sorted keys and no whitespace, so digests ignore key order."""
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))


def digest(obj: Any, length: int = 16) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:length]


def derive_seed(*labels: Any) -> int:
    """Map a tuple of labels (master seed, purpose, ...) to a 63-bit seed.

    SHA-256 over the canonical JSON of the labels; identical on every platform.
    """
    h = hashlib.sha256(canonical_json(list(labels)).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little") >> 1


def make_rng(*labels: Any) -> np.random.Generator:
    """PCG64 generator seeded from ``derive_seed(*labels)``."""
    return np.random.Generator(np.random.PCG64(derive_seed(*labels)))


def round_half_up(x: float | Fraction) -> int:
    """floor(x + 1/2), evaluated exactly on the decimal value of ``x``."""
    if not isinstance(x, Fraction):
        x = Fraction(repr(float(x)))
    return int((x + Fraction(1, 2)).__floor__())


def scaled_count(fraction: float, n: int) -> int:
    return round_half_up(Fraction(repr(float(fraction))) * n)


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
