"""Deterministic in-process simulation of the ledger and asset networks.

Everything advances in integer ticks on one logical thread. Ledger traffic
(transaction submissions and block broadcasts) is queued with an optional
seeded per-link delay and delivered FIFO per link. Asset requests are
answered within the tick. Every delivered message is appended to the trace.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

from .errors import AssetDenied, IntegrityError, Rejection, UnknownAsset, Unreachable
from .hashing import canonical_json, digest, hash_object
from .ledger import Block, Transaction, apply_block
from .node import Node

logger = logging.getLogger(__name__)

TX_SUBMIT = "TxSubmit"
BLOCK_BROADCAST = "BlockBroadcast"
ASSET_REQUEST = "AssetRequest"
ASSET_RESPONSE = "AssetResponse"
ASSET_DENIED = "AssetDenied"

CONFIG_FILE = "network.json"


@dataclass(frozen=True)
class Message:
    seq: int
    tick: int
    src: str
    dst: str
    kind: str
    payload: bytes

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "tick": self.tick,
            "from": self.src,
            "to": self.dst,
            "kind": self.kind,
            "size": len(self.payload),
            "sha256": digest(self.payload),
            "payload_b64": base64.b64encode(self.payload).decode("ascii"),
        }


class NetworkTrace:
    """Append-only record of every delivered message."""

    def __init__(self) -> None:
        self._messages: list[Message] = []

    def record(self, tick: int, src: str, dst: str, kind: str, payload: bytes) -> Message:
        msg = Message(len(self._messages), tick, src, dst, kind, bytes(payload))
        self._messages.append(msg)
        return msg

    def __iter__(self):
        return iter(self._messages)

    def __len__(self) -> int:
        return len(self._messages)

    def __getitem__(self, i):
        return self._messages[i]

    def of_kind(self, kind: str) -> list[Message]:
        return [m for m in self._messages if m.kind == kind]

    def occurrences(self, needle: bytes) -> int:
        """Number of messages whose payload contains ``needle``."""
        return sum(1 for m in self._messages if needle in m.payload)

    def to_jsonl(self) -> bytes:
        return b"".join(canonical_json(m.to_dict()) + b"\n" for m in self._messages)

    def digest(self) -> str:
        return digest(self.to_jsonl())


@dataclass
class _Pending:
    due: int
    order: int
    src: str
    dst: str
    kind: str
    payload: bytes
    body: object = field(repr=False, default=None)


@dataclass
class Envelope:
    """A batch of transactions accepted or rejected as a unit by the orderer."""

    id: int
    creator: str
    txs: tuple[Transaction, ...]
    status: str = "pending"  # pending | committed | rejected
    rejection: Optional[Rejection] = None
    height: Optional[int] = None


class Network:
    def __init__(
        self,
        node_ids: Sequence[str],
        orderer: Optional[str] = None,
        *,
        seed: int = 0,
        max_delay: int = 0,
        fetch_timeout: int = 3,
        state_dir: Optional[Union[str, os.PathLike]] = None,
        failure_injector: Optional[Callable[[str, str], bool]] = None,
    ) -> None:
        if not node_ids or len(set(node_ids)) != len(node_ids):
            raise ValueError("node ids must be non-empty and unique")
        self.node_ids = list(node_ids)
        self.orderer = orderer if orderer is not None else self.node_ids[0]
        if self.orderer not in self.node_ids:
            raise ValueError(f"orderer {self.orderer!r} is not a configured node")
        self.seed = seed
        self.max_delay = max_delay
        self.fetch_timeout = fetch_timeout
        self.state_dir = Path(state_dir) if state_dir is not None else None
        self.rng = random.Random(seed)
        self.tick = 0
        self.trace = NetworkTrace()
        self.partitioned: set[str] = set()
        self.removed: set[str] = set()
        self.envelopes: list[Envelope] = []
        self._queue: list[_Pending] = []
        self._order = 0
        self._last_due: dict[tuple[str, str], int] = {}
        self._inbox: list[Envelope] = []
        self.nodes: dict[str, Node] = {}
        for nid in self.node_ids:
            root = self.state_dir / nid if self.state_dir is not None else None
            injector = None
            if failure_injector is not None:
                injector = (lambda key, _n=nid: failure_injector(_n, key))
            node = Node(nid, root, fetch_timeout=fetch_timeout, failure_injector=injector)
            node.network = self
            self.nodes[nid] = node
        if self.state_dir is not None:
            self._write_config()

    # ------------------------------------------------------------ config persistence

    def config(self) -> dict:
        return {
            "nodes": self.node_ids,
            "orderer": self.orderer,
            "seed": self.seed,
            "max_delay": self.max_delay,
            "fetch_timeout": self.fetch_timeout,
        }

    def _write_config(self) -> None:
        assert self.state_dir is not None
        self.state_dir.mkdir(parents=True, exist_ok=True)
        (self.state_dir / CONFIG_FILE).write_bytes(canonical_json(self.config()) + b"\n")

    @classmethod
    def load(cls, state_dir: Union[str, os.PathLike], **kwargs) -> "Network":
        cfg = json.loads((Path(state_dir) / CONFIG_FILE).read_text())
        net = cls(
            cfg["nodes"],
            cfg["orderer"],
            seed=cfg.get("seed", 0),
            max_delay=cfg.get("max_delay", 0),
            fetch_timeout=cfg.get("fetch_timeout", 3),
            state_dir=state_dir,
            **kwargs,
        )
        tips = {n.chain[-1].block_hash if n.chain else None for n in net.nodes.values()}
        if len(tips) != 1:
            raise IntegrityError("node ledgers in the state directory disagree")
        return net

    # ------------------------------------------------------------ connectivity

    def node(self, node_id: str) -> Node:
        if node_id in self.removed:
            raise KeyError(f"node {node_id} has left the network")
        return self.nodes[node_id]

    @property
    def live_nodes(self) -> list[Node]:
        return [self.nodes[n] for n in self.node_ids if n not in self.removed]

    def connected(self, a: str, b: str) -> bool:
        if a in self.removed or b in self.removed:
            return False
        if a == b:
            return True
        return a not in self.partitioned and b not in self.partitioned

    def partition(self, node_id: str) -> None:
        self.partitioned.add(node_id)

    def heal(self, node_id: str) -> None:
        self.partitioned.discard(node_id)

    def remove(self, node_id: str) -> None:
        """Take a node out of the network for good."""
        if node_id == self.orderer:
            raise ValueError("the orderer cannot leave the network")
        self.removed.add(node_id)
        self._queue = [p for p in self._queue if node_id not in (p.src, p.dst)]

    # ------------------------------------------------------------ ledger network

    def _send(self, src: str, dst: str, kind: str, payload: bytes, body) -> None:
        delay = self.rng.randint(0, self.max_delay) if self.max_delay else 0
        due = max(self.tick + delay, self._last_due.get((src, dst), 0))
        self._last_due[(src, dst)] = due
        self._queue.append(_Pending(due, self._order, src, dst, kind, payload, body))
        self._order += 1

    def submit(self, creator: str, txs: Union[Transaction, Iterable[Transaction]]) -> Envelope:
        """Send a batch of transactions to the orderer; they commit or fail together."""
        if isinstance(txs, Transaction):
            txs = [txs]
        txs = tuple(txs)
        if creator in self.removed:
            raise KeyError(f"node {creator} has left the network")
        if not txs:
            raise ValueError("empty submission")
        if any(tx.creator != creator for tx in txs):
            raise ValueError("every transaction in an envelope must come from its submitter")
        env = Envelope(len(self.envelopes), creator, txs)
        self.envelopes.append(env)
        payload = canonical_json({"envelope": env.id, "txs": [tx.to_dict() for tx in txs]})
        self._send(creator, self.orderer, TX_SUBMIT, payload, env)
        return env

    def _deliver_due(self) -> int:
        delivered = 0
        remaining = []
        for p in sorted(self._queue, key=lambda p: (p.due, p.order)):
            if p.due > self.tick or not self.connected(p.src, p.dst):
                remaining.append(p)
                continue
            # keep per-link FIFO: nothing overtakes an undelivered earlier message
            if any(q.src == p.src and q.dst == p.dst for q in remaining):
                remaining.append(p)
                continue
            if p.src != p.dst:
                self.trace.record(self.tick, p.src, p.dst, p.kind, p.payload)
            if p.kind == TX_SUBMIT:
                self._inbox.append(p.body)
            else:
                self.nodes[p.dst].receive_block(p.body)
            delivered += 1
        self._queue = remaining
        return delivered

    def _cut_block(self) -> Optional[Block]:
        if not self._inbox or self.orderer in self.removed:
            return None
        orderer = self.nodes[self.orderer]
        work = orderer.state
        accepted: list[Transaction] = []
        committed: list[Envelope] = []
        for env in self._inbox:
            try:
                work = apply_block(work, env.txs)
            except Rejection as exc:
                env.status, env.rejection = "rejected", exc
                logger.info("orderer rejected envelope %d from %s: %s", env.id, env.creator, exc)
                continue
            accepted.extend(env.txs)
            committed.append(env)
        self._inbox = []
        if not accepted:
            return None
        block = orderer.order(accepted)
        for env in committed:
            env.status, env.height = "committed", block.height
        self.broadcast_block(self.orderer, block)
        return block

    def broadcast_block(self, src: str, block: Block) -> None:
        if src != self.orderer:
            raise ValueError("only the orderer broadcasts blocks")
        payload = block.encode()
        for nid in self.node_ids:
            if nid != src and nid not in self.removed:
                self._send(src, nid, BLOCK_BROADCAST, payload, block)

    # ------------------------------------------------------------ asset network

    def request_asset(self, requester: str, holder: str, key: str, purpose: str = "compute") -> bytes:
        """Ask ``holder`` for blob ``key``; it authorizes against its ledger replica."""
        if requester == holder:
            return self.nodes[holder].serve_asset(requester, key, purpose)
        if not self.connected(requester, holder):
            raise Unreachable(f"{holder} is unreachable from {requester}")
        self.trace.record(self.tick, requester, holder, ASSET_REQUEST, canonical_json({"key": key, "purpose": purpose}))
        try:
            data = self.nodes[holder].serve_asset(requester, key, purpose)
        except (AssetDenied, UnknownAsset) as exc:
            reason = exc.reason if isinstance(exc, AssetDenied) else "UnknownAsset"
            self.trace.record(self.tick, holder, requester, ASSET_DENIED, canonical_json({"key": key, "reason": reason}))
            raise
        self.trace.record(self.tick, holder, requester, ASSET_RESPONSE, data)
        if digest(data) != key:
            raise IntegrityError(f"blob from {holder} does not match {key}")
        return data

    def download(self, requester: str, holder: str, key: str) -> bytes:
        """Explicit user download: requires the download right, stores the blob locally."""
        data = self.request_asset(requester, holder, key, purpose="download")
        self.nodes[requester].store.put(data)
        return data

    # ------------------------------------------------------------ clock

    def step(self) -> bool:
        """Advance one tick. Returns True if anything happened."""
        activity = self._deliver_due() > 0
        if self._cut_block() is not None:
            activity = True
        for node in self.live_nodes:
            if node.jobs:
                activity = True
            txs = node.poll_and_execute(self.tick)
            for tx in txs:
                self.submit(node.id, tx)
            activity = activity or bool(txs)
        self.tick += 1
        return activity

    def _deliverable_later(self) -> bool:
        return any(self.connected(p.src, p.dst) for p in self._queue) or bool(self._inbox)

    def run_until_idle(self, max_ticks: int = 10_000) -> int:
        """Step until nothing can make progress. Returns the number of ticks run."""
        start = self.tick
        while self.tick - start < max_ticks:
            if not self.step() and not self._deliverable_later():
                break
        else:
            raise RuntimeError(f"network still busy after {max_ticks} ticks")
        return self.tick - start

    def settle(self, env: Envelope, max_ticks: int = 10_000) -> Envelope:
        """Run until ``env`` is decided (used by synchronous clients such as the CLI)."""
        start = self.tick
        while env.status == "pending":
            if self.tick - start >= max_ticks:
                raise RuntimeError("envelope never reached the orderer")
            self.step()
        return env

    # ------------------------------------------------------------ views

    def state_digests(self) -> dict[str, str]:
        return {n.id: n.state.digest() for n in self.live_nodes}

    def ledger_bytes(self) -> dict[str, bytes]:
        return {n.id: n.ledger_bytes() for n in self.live_nodes}

    def export_trace(self, path: Union[str, os.PathLike]) -> None:
        Path(path).write_bytes(self.trace.to_jsonl())

    def fingerprint(self) -> str:
        """Digest over ledger tip, trace and all node stores; equal for identical runs."""
        return hash_object(
            {
                "ledger": digest(self.nodes[self.orderer].ledger_bytes()),
                "trace": self.trace.digest(),
                "stores": {n.id: list(n.store.keys()) for n in self.live_nodes},
            }
        )
