"""Shared plumbing: error types, seed derivation, stable hashing, atomic writes."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path


class CmrecError(Exception):
    """Base error; exit_code drives the CLI exit status."""

    exit_code = 3


class ConfigError(CmrecError):
    exit_code = 1


class DataError(CmrecError):
    exit_code = 2


class StageError(CmrecError):
    exit_code = 3


def stage_seed(seed: int, *labels: str) -> int:
    """Derive a per-stage seed from the global seed and a label path.

    Labeled fan-out keeps each stage's randomness independent of the
    others: adding a stage never perturbs existing ones.
    """
    key = f"{seed}|" + "/".join(labels)
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") & 0x7FFFFFFFFFFFFFFF


def stable_bucket(value: int | str, seed: int, buckets: int) -> int:
    """Hash a user id into one of `buckets` folds, independent of PYTHONHASHSEED."""
    key = f"{seed}#{value}"
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % buckets


def params_hash(payload) -> str:
    """Short content hash of a parameter mapping (or any JSON-able value).

    Key order does not matter; the same parameters always produce the
    same tag, which keeps derived feature names stable across runs.
    """
    canon = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha1(canon.encode("utf-8")).hexdigest()[:8]


def fmt(x: float) -> str:
    """Shortest round-trip decimal form; keeps cached TSVs lossless."""
    return repr(float(x))


def atomic_write_text(path: Path | str, text: str) -> None:
    """Write via temp-then-rename so partially written files never appear."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
