"""Per-node logic: private data, ledger replica, asset serving and the compute loop."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any, Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from . import chaincode as cc
from . import ml
from .assets import MetricSpec, NodeId, Permissions, PermissionRegime, check_download_right, check_process_right, permissions_payload
from .content_store import BlobStore
from .errors import AssetDenied, IntegrityError, NotFound, Rejection, Reason, UnknownAsset, Unreachable
from .hashing import ContentHash, canonical_json, digest
from .ledger import Block, Transaction, append_block, apply_block, block_is_consistent, encode_chain, load_chain, replay, tip_hash
from .state import DOING, TODO, Testtuple, Traintuple, WorldState

if TYPE_CHECKING:
    from .network import Network

logger = logging.getLogger(__name__)

PRIVATE_ASSET = "PrivateAsset"
NOT_AUTHORIZED = "NotAuthorized"

class FetchFailed(Exception):
    """An asset could not be obtained this tick; the worker may retry."""


@dataclass
class Job:
    tuple_key: str
    started: int
    last_error: str = ""


def tuple_needs(state: WorldState, record: Union[Traintuple, Testtuple]) -> dict[ContentHash, NodeId]:
    """Blobs a worker must hold to execute ``record``, mapped to the node holding each."""
    needs: dict[ContentHash, NodeId] = {}
    if isinstance(record, Traintuple):
        algo = state.algorithms[record.algorithm_key]
        needs[algo.file_hash] = algo.owner
        for pos, parent_key in enumerate(record.input_model_keys):
            parent = state.traintuples[parent_key]
            h = parent.out_head_model if record.kind == "composite" and pos == 1 else parent.out_model
            if h is not None:
                needs[h] = parent.worker
        if record.dataset_key is not None:
            ds = state.datasets[record.dataset_key]
            needs[ds.opener_hash] = ds.owner
    else:
        algo = state.algorithms[record.algorithm_key]
        needs[algo.file_hash] = algo.owner
        parent = state.traintuples[record.traintuple_key]
        for h in (parent.out_model, parent.out_head_model):
            if h is not None:
                needs[h] = parent.worker
        objective = state.objectives[record.objective_key]
        needs[objective.metrics_hash] = objective.owner
        for ds_key in _test_datasets(state, record):
            ds = state.datasets[ds_key]
            needs[ds.opener_hash] = ds.owner
    return needs


def _test_datasets(state: WorldState, record: Testtuple) -> list[ContentHash]:
    if record.dataset_key is not None:
        return [record.dataset_key]
    return state.objectives[record.objective_key].test_dataset_keys


def sample_count(state: WorldState, tuple_key: str) -> int:
    """Number of data samples a model has (transitively) been trained on."""
    tt = state.traintuples[tuple_key]
    if tt.kind == "aggregator":
        return sum(sample_count(state, k) for k in tt.input_model_keys)
    return len(tt.sample_keys)


class Node:
    def __init__(
        self,
        node_id: NodeId,
        root: Optional[Union[str, os.PathLike]] = None,
        *,
        fetch_timeout: int = 3,
        failure_injector: Optional[Callable[[str], bool]] = None,
    ) -> None:
        self.id = node_id
        self.root = Path(root) if root is not None else None
        self.store = BlobStore(self.root / "assets" if self.root is not None else None)
        self.private: dict[ContentHash, bytes] = {}
        self.chain: list[Block] = []
        self.state = WorldState()
        self.fetch_timeout = fetch_timeout
        self.failure_injector = failure_injector
        self.jobs: dict[str, Job] = {}
        self.handled: set[str] = set()
        self.pending_datasets: dict[str, ContentHash] = {}  # registered here, not yet in a block
        self.network: Optional["Network"] = None
        if self.root is not None:
            (self.root / "private").mkdir(parents=True, exist_ok=True)
            for p in sorted((self.root / "private").iterdir()):
                data = p.read_bytes()
                if digest(data) != p.name:
                    raise IntegrityError(f"private sample {p} is corrupt")
                self.private[ContentHash(p.name)] = data
            self.chain = load_chain(self.ledger_path)
            self.state = replay(self.chain)

    def __repr__(self) -> str:
        return f"Node({self.id!r}, height={len(self.chain)})"

    @property
    def ledger_path(self) -> Path:
        assert self.root is not None
        return self.root / "ledger.jsonl"

    # ------------------------------------------------------------ ledger replica

    def receive_block(self, block: Block, state: Optional[WorldState] = None) -> None:
        if not block_is_consistent(block, len(self.chain), tip_hash(self.chain)):
            raise IntegrityError(f"{self.id}: block {block.height} does not extend the local chain")
        if state is None:
            try:
                state = apply_block(self.state, block.txs)
            except Rejection as exc:
                raise IntegrityError(f"{self.id}: block {block.height} contains an invalid tx: {exc}") from exc
        self.chain.append(block)
        self.state = state
        for tx in block.txs:
            if tx.kind == cc.REGISTER_DATASET:
                self.pending_datasets.pop(tx.tx_id, None)
        if self.root is not None:
            with open(self.ledger_path, "ab") as fh:
                fh.write(block.encode() + b"\n")

    def order(self, txs: Sequence[Transaction]) -> Block:
        """Orderer role: validate and append a block to the local chain."""
        chain = list(self.chain)
        block, state = append_block(chain, txs, self.state)
        self.receive_block(block, state)
        return block

    # ------------------------------------------------------------ client operations

    def _tx(self, kind: str, payload: dict[str, Any]) -> Transaction:
        return Transaction(self.id, kind, {k: v for k, v in payload.items() if v is not None})

    def register_objective(
        self,
        name: str,
        metric: str,
        test_samples: Iterable[tuple[str, str]] = (),
        permissions: Permissions = None,
        description: Optional[bytes] = None,
    ) -> Transaction:
        spec = MetricSpec(metric)
        metrics_hash = self.store.put(canonical_json({"metric": spec.to_dict()}))
        payload = {
            "name": name,
            "metric": spec.to_dict(),
            "metrics_hash": metrics_hash,
            "test_samples": [[s, d] for s, d in sorted(test_samples)],
            "permissions": permissions_payload(permissions),
            "description_hash": self.store.put(description) if description is not None else None,
        }
        return self._tx(cc.REGISTER_OBJECTIVE, payload)

    def register_dataset(
        self,
        name: str,
        opener: ml.OpenerDescriptor,
        permissions: Permissions = None,
        objective_key: Optional[str] = None,
        data_type: str = "tabular",
        description: Optional[bytes] = None,
    ) -> Transaction:
        payload = {
            "name": name,
            "opener_hash": self.store.put(opener.encode()),
            "data_type": data_type,
            "permissions": permissions_payload(permissions),
            "objective_key": objective_key,
            "description_hash": self.store.put(description) if description is not None else None,
        }
        tx = self._tx(cc.REGISTER_DATASET, payload)
        self.pending_datasets[tx.tx_id] = payload["opener_hash"]
        return tx

    def register_algorithm(
        self,
        name: str,
        spec,
        permissions: Permissions = None,
        objective_key: Optional[str] = None,
        description: Optional[bytes] = None,
    ) -> Transaction:
        kind = spec.to_dict()["kind"]
        payload = {
            "name": name,
            "kind": kind,
            "file_hash": self.store.put(ml.encode_spec(spec)),
            "permissions": permissions_payload(permissions),
            "objective_key": objective_key,
            "description_hash": self.store.put(description) if description is not None else None,
        }
        return self._tx(cc.REGISTER_ALGORITHM, payload)

    def register_local_data(
        self, samples: Sequence[bytes], dataset_key: str, test_only: Union[bool, Sequence[bool]] = False
    ) -> Optional[Transaction]:
        """Keep sample bytes here and build the metadata-only registration.

        Returns None when every sample is already registered in the dataset.
        """
        dataset = self.state.datasets.get(dataset_key)
        owned = dataset.owner == self.id if dataset is not None else dataset_key in self.pending_datasets
        if not owned:
            raise Rejection(Reason.PERMISSION_DENIED, f"{self.id} does not own dataset {dataset_key}")
        flags = [test_only] * len(samples) if isinstance(test_only, bool) else list(test_only)
        if len(flags) != len(samples):
            raise ValueError("one test flag per sample")
        entries = []
        seen = set()
        for data, flag in zip(samples, flags):
            h = digest(data)
            existing = self.state.samples.get(h)
            if h in seen or (existing is not None and dataset_key in existing.dataset_keys):
                logger.warning("%s: sample %s already registered in %s", self.id, h[:12], dataset_key[:12])
                continue
            seen.add(h)
            self._keep_private(h, data)
            entries.append({"key": h, "test_only": bool(flag)})
        if not entries:
            return None
        return self._tx(cc.REGISTER_DATA_SAMPLES, {"dataset_key": dataset_key, "samples": entries})

    def _keep_private(self, h: ContentHash, data: bytes) -> None:
        self.private[h] = bytes(data)
        if self.root is not None:
            path = self.root / "private" / h
            if not path.exists():
                path.write_bytes(data)

    def create_traintuple(
        self,
        algorithm_key: str,
        objective_key: str,
        dataset_key: Optional[str] = None,
        sample_keys: Sequence[str] = (),
        input_model_keys: Sequence[str] = (),
        permissions: Permissions = None,
        tag: Optional[str] = None,
    ) -> Transaction:
        payload = cc.traintuple_payload(algorithm_key, objective_key, dataset_key, sample_keys, input_model_keys, permissions, tag)
        return self._tx(cc.CREATE_TRAINTUPLE, payload)

    def create_testtuple(
        self,
        traintuple_key: str,
        objective_key: str,
        dataset_key: Optional[str] = None,
        sample_keys: Sequence[str] = (),
        tag: Optional[str] = None,
    ) -> Transaction:
        payload = cc.testtuple_payload(traintuple_key, objective_key, dataset_key, sample_keys, tag)
        return self._tx(cc.CREATE_TESTTUPLE, payload)

    def update_permissions(self, asset_key: str, permissions: Permissions) -> Transaction:
        return self._tx(cc.UPDATE_PERMISSIONS, {"asset_key": asset_key, "permissions": permissions_payload(permissions)})

    # ------------------------------------------------------------ asset network (holder side)

    def _asset_regimes(self, key: str) -> list[tuple[PermissionRegime, str]]:
        """Ledger regimes governing a common asset blob held here, with what it is."""
        st = self.state
        found = []
        for algo in st.algorithms.values():
            if algo.file_hash == key and algo.owner == self.id:
                found.append((algo.permissions, "algorithm"))
            if algo.description_hash == key and algo.owner == self.id:
                found.append((algo.permissions, "description"))
        for rec in st.model_records(key):
            if rec.holder == self.id:
                found.append((rec.permissions, rec.role))
        for obj in st.objectives.values():
            if obj.owner == self.id and key in (obj.metrics_hash, obj.description_hash):
                found.append((obj.permissions, "metrics" if key == obj.metrics_hash else "description"))
        for ds in st.datasets.values():
            if ds.owner == self.id and key in (ds.opener_hash, ds.description_hash):
                found.append((ds.permissions, "opener" if key == ds.opener_hash else "description"))
        return found

    def _active_needs(self, requester: NodeId, key: str) -> bool:
        for record in self.state.iter_tuples():
            if record.worker != requester or record.status not in (TODO, DOING):
                continue
            if key in tuple_needs(self.state, record):
                return True
        return False

    def serve_asset(self, requester: NodeId, key: str, purpose: str = "compute") -> bytes:
        """Authorize a request against this node's ledger replica and return the blob."""
        if key in self.private or key in self.state.samples:
            raise AssetDenied(PRIVATE_ASSET, "raw data never leaves its node")
        regimes = self._asset_regimes(key)
        if not regimes or key not in self.store:
            raise UnknownAsset(key)
        allowed = any(check_download_right(r, requester) for r, _ in regimes)
        if not allowed and any(what == "description" for _, what in regimes):
            allowed = any(check_process_right(r, requester) for r, _ in regimes)
        if not allowed and purpose == "compute":
            allowed = self._active_needs(requester, key)
        if not allowed:
            raise AssetDenied(NOT_AUTHORIZED, f"{requester} may not obtain {key[:12]}")
        return self.store.get(key)

    # ------------------------------------------------------------ compute loop

    def _fetch(self, key: ContentHash, holder: NodeId) -> None:
        if key in self.store:
            return
        if holder == self.id or self.network is None:
            raise FetchFailed(f"{key[:12]} is missing locally")
        try:
            data = self.network.request_asset(self.id, holder, key)
        except (AssetDenied, UnknownAsset, IntegrityError, Unreachable) as exc:
            raise FetchFailed(f"{key[:12]} from {holder}: {type(exc).__name__}: {exc}") from exc
        self.store.put(data)

    def poll_and_execute(self, tick: int) -> list[Transaction]:
        """Advance at most one tuple assigned to this node; returns the txs to submit."""
        out: list[Transaction] = []
        job = next(iter(self.jobs.values()), None)
        if job is None:
            record = self._next_todo()
            if record is None:
                return out
            self.handled.add(record.key)
            if record.status == TODO:
                out.append(self._tx(cc.UPDATE_STATUS, {"tuple_key": record.key, "status": DOING}))
            job = self.jobs[record.key] = Job(record.key, tick)
        record = self.state.tuple(job.tuple_key)
        try:
            for key, holder in sorted(tuple_needs(self.state, record).items()):
                self._fetch(key, holder)
        except FetchFailed as exc:
            job.last_error = str(exc)
            if tick - job.started >= self.fetch_timeout:
                del self.jobs[job.tuple_key]
                out.append(self._fail(record, f"asset fetch timed out: {exc}"))
            return out
        del self.jobs[job.tuple_key]
        try:
            if self.failure_injector is not None and self.failure_injector(record.key):
                raise RuntimeError("injected executor failure")
            out.append(self._execute(record))
        except Exception as exc:  # executor errors become a failed status, never a crash
            logger.info("%s: tuple %s failed: %s", self.id, record.key[:12], exc)
            out.append(self._fail(record, f"{type(exc).__name__}: {exc}"))
        return out

    def has_work(self) -> bool:
        return bool(self.jobs) or self._next_todo() is not None

    def _next_todo(self):
        candidates = [
            r for r in self.state.iter_tuples()
            if r.worker == self.id and r.key not in self.handled and r.status in (TODO, DOING)
        ]
        if not candidates:
            return None
        return min(candidates, key=lambda r: (getattr(r, "rank", 1 << 30), r.key))

    def _fail(self, record, log: str) -> Transaction:
        return self._tx(cc.UPDATE_STATUS, {"tuple_key": record.key, "status": "failed", "log": log})

    def opener_for(self, dataset_key: str) -> ml.OpenerDescriptor:
        ds = self.state.datasets.get(dataset_key)
        opener_hash = ds.opener_hash if ds is not None else self.pending_datasets.get(dataset_key)
        if opener_hash is None:
            raise UnknownAsset(f"dataset {dataset_key}")
        return ml.OpenerDescriptor.from_dict(json.loads(self.store.get(opener_hash)))

    def _open(self, dataset_key: str, sample_keys: Sequence[str]):
        return ml.open_samples(self.opener_for(dataset_key), [self.private[k] for k in sample_keys])

    def _model(self, key: Optional[str]) -> Optional[ml.ModelWeights]:
        return None if key is None else ml.ModelWeights.decode(self.store.get(key))

    def _execute(self, record) -> Transaction:
        st = self.state
        spec = ml.decode_spec(self.store.get(st.algorithms[record.algorithm_key].file_hash))
        objective = st.objectives[record.objective_key]
        if isinstance(record, Testtuple):
            parent = st.traintuples[record.traintuple_key]
            by_dataset: dict[str, list[str]] = {}
            for sk in record.sample_keys:
                ds_key = record.dataset_key or dict(objective.test_samples)[sk]
                by_dataset.setdefault(ds_key, []).append(sk)
            parts = [self._open(ds, keys) for ds, keys in sorted(by_dataset.items())]
            X = np.vstack([p[0] for p in parts])
            y = np.concatenate([p[1] for p in parts])
            if isinstance(spec, ml.CompositeSpec):
                perf = ml.evaluate_composite(
                    objective.metric, spec, self._model(parent.out_model), self._model(parent.out_head_model), X, y
                )
            else:
                perf = ml.evaluate(objective.metric, spec.family, self._model(parent.out_model), X, y)
            return self._tx(cc.LOG_TEST_RESULT, {"tuple_key": record.key, "performance": perf})

        parents = [st.traintuples[k] for k in record.input_model_keys]
        payload: dict[str, Any] = {"tuple_key": record.key}
        if isinstance(spec, ml.AggregatorSpec):
            models = [self._model(p.out_model) for p in parents]
            counts = [sample_count(st, p.key) for p in parents] if spec.weighting == "by_sample_count" else None
            payload["model_hash"] = self.store.put(ml.aggregate(spec, models, counts).encode())
        elif isinstance(spec, ml.CompositeSpec):
            X, y = self._open(record.dataset_key, record.sample_keys)
            trunk_in = self._model(parents[0].out_model) if parents else None
            head_in = self._model(parents[1].out_head_model) if len(parents) > 1 else None
            trunk, head = ml.train_composite(spec, trunk_in, head_in, X, y)
            payload["model_hash"] = self.store.put(trunk.encode())
            payload["head_model_hash"] = self.store.put(head.encode())
            payload["performance"] = ml.evaluate_composite(objective.metric, spec, trunk, head, X, y)
        else:
            X, y = self._open(record.dataset_key, record.sample_keys)
            init = self._model(parents[0].out_model) if parents else None
            model = ml.train(spec, init, X, y)
            payload["model_hash"] = self.store.put(model.encode())
            payload["performance"] = ml.evaluate(objective.metric, spec.family, model, X, y)
        return self._tx(cc.LOG_TRAIN_RESULT, payload)

    # ------------------------------------------------------------ local serving

    def serve_prediction(self, model_key: str, features: Sequence[float]) -> np.ndarray:
        """Predict with a model blob held here. Composite models need both halves present."""
        records = self.state.model_records(model_key)
        if not records:
            raise UnknownAsset(model_key)
        if not any(check_process_right(r.permissions, self.id) for r in records):
            raise Rejection(Reason.PERMISSION_DENIED, f"{self.id} cannot process model {model_key[:12]}")
        if model_key not in self.store:
            raise UnknownAsset(f"model {model_key[:12]} is not held by {self.id}")
        rec = records[0]
        tt = self.state.traintuples[rec.producing_tuple]
        spec = ml.decode_spec(self._algorithm_blob(tt.eval_algorithm_key))
        x = np.asarray(features, dtype=np.float64)
        if tt.model_type == "composite":
            trunk_key, head_key = tt.out_model, tt.out_head_model
            for k in (trunk_key, head_key):
                if k not in self.store:
                    raise UnknownAsset(f"composite part {k[:12]} is not held by {self.id}")
            return ml.predict_composite(spec, self._model(trunk_key), self._model(head_key), x)
        if tt.model_type == "trunk":
            raise Rejection(Reason.KIND_MISMATCH, "a trunk alone cannot predict")
        return ml.predict(spec.family, self._model(model_key), x)

    def _algorithm_blob(self, algorithm_key: str) -> bytes:
        algo = self.state.algorithms[algorithm_key]
        try:
            return self.store.get(algo.file_hash)
        except NotFound:
            if self.network is None:
                raise
            data = self.network.request_asset(self.id, algo.owner, algo.file_hash, purpose="download")
            self.store.put(data)
            return data

    def ledger_bytes(self) -> bytes:
        return encode_chain(self.chain)
