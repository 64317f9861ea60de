"""
Hashing and structured-log utilities.

All functions except the file writers are deterministic and side-effect free.
"""
import hashlib
import json
import os
import time
from typing import Iterable

import numpy as np


def canonical_json(obj) -> str:
    """Serialize a JSON-compatible object into a canonical string (sorted keys, compact)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def fingerprint(obj) -> str:
    """Return a SHA-256 hex digest over the canonical JSON representation of obj."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def array_fingerprint(arrays: Iterable[np.ndarray]) -> str:
    """SHA-256 over dtype, shape and raw bytes of each array, in order.

    Two parameter sets share a fingerprint iff they are bit-identical.
    """
    digest = hashlib.sha256()
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        digest.update(str(arr.dtype).encode("utf-8"))
        digest.update(repr(arr.shape).encode("utf-8"))
        digest.update(arr.tobytes())
    return digest.hexdigest()


def make_log_entry(action: str, success: bool, reason=None, /, **metadata) -> dict:
    entry = {
        "timestamp": time.ctime(),
        "action": action,
        "success": success,
        "reason": reason,
    }
    # metadata never overwrites the core keys
    for k, v in metadata.items():
        if k not in entry:
            entry[k] = v
    return entry


def append_jsonl(path: str, entry: dict) -> None:
    """Append one record to a JSON-lines file, creating parent directories."""
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(entry, sort_keys=True) + "\n")


def read_jsonl(path: str) -> list[dict]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_json(path: str, data, indent: int = 2) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=indent, sort_keys=True)
        f.write("\n")


def strip_timestamps(record, keys: tuple[str, ...] = ("timestamp", "generated_at", "seconds")):
    """Drop wall-clock fields recursively so two runs can be compared byte for byte."""
    if isinstance(record, dict):
        return {k: strip_timestamps(v, keys) for k, v in record.items() if k not in keys}
    if isinstance(record, list):
        return [strip_timestamps(v, keys) for v in record]
    return record
