"""Content-addressed blob storage, one file per blob named by its hex digest."""

from __future__ import annotations

import logging
import os
import threading
from pathlib import Path

from .errors import IntegrityError, NotFound, StoreError
from .hashing import ContentHash, digest

logger = logging.getLogger(__name__)


class BlobStore:
    """Blobs addressed by SHA-256.

    With ``root=None`` blobs are kept in memory, otherwise each blob lives in
    ``<root>/<hex_hash>``. Every read re-hashes the bytes.
    """

    def __init__(self, root: str | os.PathLike | None = None) -> None:
        self.root = Path(root) if root is not None else None
        self._mem: dict[str, bytes] = {}
        self._lock = threading.Lock()
        if self.root is not None:
            try:
                self.root.mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise StoreError(f"cannot create store at {self.root}: {exc}") from exc

    def _path(self, h: str) -> Path:
        assert self.root is not None
        return self.root / h

    def put(self, data: bytes) -> ContentHash:
        data = bytes(data)
        h = digest(data)
        with self._lock:
            if self.root is None:
                existing = self._mem.get(h)
                if existing is not None and existing != data:
                    raise IntegrityError(f"hash collision on {h}")
                self._mem.setdefault(h, data)
                return h
            path = self._path(h)
            if path.exists():
                if path.read_bytes() != data:
                    raise IntegrityError(f"hash collision or corrupt blob at {path}")
                return h
            tmp = path.with_suffix(".tmp")
            try:
                tmp.write_bytes(data)
                os.replace(tmp, path)
            except OSError as exc:
                raise StoreError(f"cannot write blob {h}: {exc}") from exc
        return h

    def get(self, h: str) -> bytes:
        h = ContentHash(h)
        if self.root is None:
            try:
                data = self._mem[h]
            except KeyError:
                raise NotFound(h) from None
        else:
            try:
                data = self._path(h).read_bytes()
            except FileNotFoundError:
                raise NotFound(h) from None
            except OSError as exc:
                raise StoreError(f"cannot read blob {h}: {exc}") from exc
        if digest(data) != h:
            raise IntegrityError(f"blob {h} does not match its digest")
        return data

    def __contains__(self, h: object) -> bool:
        if not isinstance(h, str):
            return False
        if self.root is None:
            return h in self._mem
        try:
            return self._path(ContentHash(h)).is_file()
        except ValueError:
            return False

    def keys(self) -> list[ContentHash]:
        if self.root is None:
            return sorted(ContentHash(k) for k in self._mem)
        return sorted(ContentHash(p.name) for p in self.root.iterdir() if len(p.name) == 64)

    def __len__(self) -> int:
        return len(self.keys())


def put_blob(store: BlobStore, data: bytes) -> ContentHash:
    return store.put(data)


def get_blob(store: BlobStore, h: str) -> bytes:
    return store.get(h)
