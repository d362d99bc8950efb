"""Small shared helpers: stable hashing, seed derivation, deterministic JSON."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path


def stable_digest(*parts: object) -> str:
    """Hex digest that is stable across processes (unlike builtin hash)."""
    h = hashlib.sha256()
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return h.hexdigest()


def derive_seed(*parts: object) -> int:
    """Derive an independent 63-bit RNG seed from arbitrary labelled parts."""
    return int(stable_digest(*parts)[:15], 16)


def dump_json(obj, path: str | Path) -> None:
    """Write JSON with sorted keys so reruns are byte-identical."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


def to_json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


def load_json(path: str | Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
