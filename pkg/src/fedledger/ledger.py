"""Append-only hash-chained ledger.

Blocks carry transaction metadata only. The world state is never stored: it
is recomputed by replaying every transaction through the chaincode.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

from .chaincode import apply_transaction, record_key
from .errors import IntegrityError, NoOpBlock, Rejection
from .hashing import ZERO_HASH, ContentHash, canonical_json, hash_object
from .state import WorldState


@dataclass(frozen=True)
class Transaction:
    creator: str
    kind: str
    payload: Mapping[str, Any]
    tx_id: ContentHash = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.tx_id is None:
            object.__setattr__(self, "tx_id", self.compute_id())

    def compute_id(self) -> ContentHash:
        return record_key(self.creator, self.kind, self.payload)

    def to_dict(self) -> dict[str, Any]:
        return {"creator": self.creator, "kind": self.kind, "payload": self.payload, "tx_id": self.tx_id}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Transaction":
        return cls(creator=d["creator"], kind=d["kind"], payload=d["payload"], tx_id=ContentHash(d["tx_id"]))

    def encode(self) -> bytes:
        return canonical_json(self.to_dict())


def compute_block_hash(height: int, prev_hash: str, tx_ids: Sequence[str]) -> ContentHash:
    return hash_object({"height": height, "prev_hash": prev_hash, "tx_ids": list(tx_ids)})


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: ContentHash
    txs: tuple[Transaction, ...]
    block_hash: ContentHash = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        object.__setattr__(self, "txs", tuple(self.txs))
        if self.block_hash is None:
            object.__setattr__(self, "block_hash", self.compute_hash())

    def compute_hash(self) -> ContentHash:
        return compute_block_hash(self.height, self.prev_hash, [tx.tx_id for tx in self.txs])

    def to_dict(self) -> dict[str, Any]:
        return {
            "block_hash": self.block_hash,
            "height": self.height,
            "prev_hash": self.prev_hash,
            "txs": [tx.to_dict() for tx in self.txs],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Block":
        return cls(
            height=d["height"],
            prev_hash=ContentHash(d["prev_hash"]),
            txs=tuple(Transaction.from_dict(t) for t in d["txs"]),
            block_hash=ContentHash(d["block_hash"]),
        )

    def encode(self) -> bytes:
        return canonical_json(self.to_dict())


def tip_hash(chain: Sequence[Block]) -> ContentHash:
    return chain[-1].block_hash if chain else ZERO_HASH


def block_is_consistent(block: Block, height: int, prev_hash: str) -> bool:
    if type(block.height) is not int or block.height != height or block.prev_hash != prev_hash:
        return False
    if any(tx.tx_id != tx.compute_id() for tx in block.txs):
        return False
    return block.block_hash == block.compute_hash()


def validate_chain(chain: Sequence[Block]) -> bool:
    """True iff every block hash and hash link recomputes."""
    prev = ZERO_HASH
    for height, block in enumerate(chain):
        try:
            if not block_is_consistent(block, height, prev):
                return False
        except (TypeError, ValueError):
            return False
        prev = block.block_hash
    return True


def apply_block(state: WorldState, txs: Iterable[Transaction], on_delta: Optional[Callable] = None) -> WorldState:
    """Apply ``txs`` atomically to a copy of ``state``; raises Rejection on the first invalid one."""
    work = state.copy()
    for tx in txs:
        delta = apply_transaction(work, tx)
        work.apply(delta)
        if on_delta is not None:
            on_delta(tx, delta)
    return work


def append_block(chain: list[Block], txs: Sequence[Transaction], state: Optional[WorldState] = None) -> tuple[Block, WorldState]:
    """Validate ``txs`` and link a new block to the tip of ``chain``.

    The whole block is rejected if any transaction is. ``chain`` is extended
    in place on success. Returns the block and the resulting state.
    """
    if not txs:
        raise NoOpBlock("a block needs at least one transaction")
    if state is None:
        state = replay(chain)
    new_state = apply_block(state, txs)
    block = Block(height=len(chain), prev_hash=tip_hash(chain), txs=tuple(txs))
    chain.append(block)
    return block, new_state


def replay(chain: Sequence[Block], on_delta: Optional[Callable] = None) -> WorldState:
    """Rebuild the world state from genesis. ``on_delta(tx, delta)`` observes every step."""
    if not validate_chain(chain):
        raise IntegrityError("chain failed hash validation")
    state = WorldState()
    for block in chain:
        for tx in block.txs:
            try:
                delta = apply_transaction(state, tx)
            except Rejection as exc:
                raise IntegrityError(f"committed tx {tx.tx_id} is invalid: {exc}") from exc
            state.apply(delta)
            if on_delta is not None:
                on_delta(tx, delta)
    return state


def status_histories(chain: Sequence[Block]) -> dict[str, list[str]]:
    """Every status each tuple went through, in commit order."""
    histories: dict[str, list[str]] = {}

    def observe(tx, delta):
        for key, status in delta.status_events:
            hist = histories.setdefault(key, [])
            if not hist or hist[-1] != status:
                hist.append(status)

    replay(chain, observe)
    return histories


# ---------------------------------------------------------------- persistence


def encode_chain(chain: Sequence[Block]) -> bytes:
    return b"".join(block.encode() + b"\n" for block in chain)


def decode_chain(data: bytes) -> list[Block]:
    """Parse a JSON-lines ledger. Any non-canonical byte raises IntegrityError."""
    if not data:
        return []
    if not data.endswith(b"\n"):
        raise IntegrityError("ledger does not end with a newline")
    chain = []
    for lineno, line in enumerate(data[:-1].split(b"\n")):
        try:
            obj = json.loads(line.decode("utf-8"))
            block = Block.from_dict(obj)
            encoded = block.encode()  # non-finite floats read back from mutated digits raise here
        except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
            raise IntegrityError(f"line {lineno}: unreadable block ({exc})") from None
        if encoded != line:
            raise IntegrityError(f"line {lineno}: block is not canonically encoded")
        chain.append(block)
    return chain


def validate_ledger_bytes(data: bytes) -> bool:
    try:
        chain = decode_chain(data)
    except IntegrityError:
        return False
    return validate_chain(chain)


def save_chain(chain: Sequence[Block], path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_chain(chain))


def load_chain(path: str | os.PathLike) -> list[Block]:
    p = Path(path)
    if not p.exists():
        return []
    chain = decode_chain(p.read_bytes())
    if not validate_chain(chain):
        raise IntegrityError(f"{p}: hash chain is broken")
    return chain
