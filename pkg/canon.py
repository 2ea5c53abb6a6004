from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path
from typing import Any, Dict, TextIO


def _jsonable(x: Any) -> Any:
    # Tuples become lists, non-string keys become strings (sorted later by json.dumps).
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def canon_json_bytes(x: Any) -> bytes:
    x = _jsonable(x)
    return json.dumps(
        x,
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    ).encode("utf-8")


def canon_json_line(x: Any) -> str:
    return canon_json_bytes(x).decode("utf-8")


def sha256_hex(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def hash_canon(x: Any) -> str:
    return sha256_hex(canon_json_bytes(x))


def mix32(a: int, b: int) -> int:
    return (a * 0x9E3779B9 + b) & 0xFFFFFFFF


def derive_seeds(global_seed: int, epoch: int) -> Dict[str, int]:
    base = mix32(global_seed & 0xFFFFFFFF, epoch & 0xFFFFFFFF)
    return {
        "shuffle": mix32(base, 1),
        "init": mix32(base, 2),
        "dropout": mix32(base, 3),
        "sampling": mix32(base, 4),
    }


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, bool):
        return "1" if v else "0"
    return str(v).replace(" ", "_")


def status_line(tag: str, stream: TextIO = None, **fields: Any) -> str:
    """Emit one `TAG key=value ...` line to stderr (or `stream`) and return it."""
    parts = [tag] + [f"{k}={_fmt(v)}" for k, v in fields.items()]
    line = " ".join(parts)
    print(line, file=stream if stream is not None else sys.stderr)
    return line


def write_json(p: Path, obj: Any) -> None:
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")
