"""Canonical JSON serialization and content digests.

One serialization rule everywhere (sorted keys, compact separators, UTF-8,
no NaN/Inf) so snapshots, reports, and store digests are byte-stable.
"""

from __future__ import annotations

import hashlib
import json


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def canonical_bytes(obj) -> bytes:
    return canonical_json(obj).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest(obj) -> str:
    """SHA-256 over the canonical JSON form."""
    return sha256_hex(canonical_bytes(obj))
