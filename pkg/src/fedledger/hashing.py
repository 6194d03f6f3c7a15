"""Content hashes and the canonical JSON encoding that feeds them."""

from __future__ import annotations

import hashlib
import json
from typing import Any

DIGEST_SIZE = 32


class ContentHash(str):
    """A SHA-256 digest carried as 64 lowercase hex characters."""

    __slots__ = ()

    def __new__(cls, value: str) -> "ContentHash":
        if isinstance(value, ContentHash):
            return value
        if not isinstance(value, str) or len(value) != 2 * DIGEST_SIZE:
            raise ValueError(f"not a content hash: {value!r}")
        try:
            raw = bytes.fromhex(value)
        except ValueError:
            raise ValueError(f"not a content hash: {value!r}") from None
        if raw.hex() != value:
            raise ValueError(f"content hash must be lowercase hex: {value!r}")
        return super().__new__(cls, value)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ContentHash":
        if len(raw) != DIGEST_SIZE:
            raise ValueError(f"digest must be {DIGEST_SIZE} bytes, got {len(raw)}")
        return super().__new__(cls, raw.hex())

    def to_bytes(self) -> bytes:
        return bytes.fromhex(self)


ZERO_HASH = ContentHash("0" * 64)


def digest(data: bytes) -> ContentHash:
    return ContentHash.from_bytes(hashlib.sha256(data).digest())


def canonical_json(obj: Any) -> bytes:
    """Key-sorted, whitespace-free UTF-8 JSON. Floats use shortest round-trip repr."""
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def hash_object(obj: Any) -> ContentHash:
    return digest(canonical_json(obj))
