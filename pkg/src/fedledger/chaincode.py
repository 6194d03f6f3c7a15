"""Deterministic validation rules for every ledger transaction.

``apply_transaction`` is a pure function of (state, transaction): it either
returns the records the transaction writes or raises :class:`Rejection`.
Permissions are enforced here, before anything reaches the ledger.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import replace
from typing import Any, Callable, Mapping, Optional, Sequence, Union

from .assets import (
    ALGORITHM_KINDS,
    Algorithm,
    DataSample,
    Dataset,
    MetricSpec,
    NodeId,
    Objective,
    PermissionRegime,
    Permissions,
    check_process_right,
    intersect_permissions,
    permissions_payload,
    regime_from_request,
)
from .errors import Reason, Rejection
from .hashing import ContentHash, hash_object
from .state import (
    DOING,
    DONE,
    FAILED,
    TERMINAL,
    TODO,
    TRANSITIONS,
    WAITING,
    StateDelta,
    Testtuple,
    Traintuple,
    WorldState,
    clip_log,
)

# transaction kinds
REGISTER_OBJECTIVE = "RegisterObjective"
REGISTER_DATASET = "RegisterDataset"
REGISTER_DATA_SAMPLES = "RegisterDataSamples"
REGISTER_ALGORITHM = "RegisterAlgorithm"
CREATE_TRAINTUPLE = "CreateTraintuple"
CREATE_TESTTUPLE = "CreateTesttuple"
UPDATE_STATUS = "UpdateStatus"
LOG_TRAIN_RESULT = "LogTrainResult"
LOG_TEST_RESULT = "LogTestResult"
UPDATE_PERMISSIONS = "UpdatePermissions"

TX_KINDS = (
    REGISTER_OBJECTIVE,
    REGISTER_DATASET,
    REGISTER_DATA_SAMPLES,
    REGISTER_ALGORITHM,
    CREATE_TRAINTUPLE,
    CREATE_TESTTUPLE,
    UPDATE_STATUS,
    LOG_TRAIN_RESULT,
    LOG_TEST_RESULT,
    UPDATE_PERMISSIONS,
)


def record_key(creator: NodeId, kind: str, payload: Mapping[str, Any]) -> ContentHash:
    """Key of the asset or tuple created by a transaction (equal to its tx id)."""
    return hash_object({"creator": creator, "kind": kind, "payload": payload})


def traintuple_payload(
    algorithm_key: str,
    objective_key: str,
    dataset_key: Optional[str] = None,
    sample_keys: Sequence[str] = (),
    input_model_keys: Sequence[str] = (),
    permissions: Permissions = None,
    tag: Optional[str] = None,
) -> dict[str, Any]:
    return {
        "algorithm_key": algorithm_key,
        "objective_key": objective_key,
        "dataset_key": dataset_key,
        "sample_keys": list(sample_keys) or None,
        "input_model_keys": list(input_model_keys) or None,
        "permissions": permissions_payload(permissions),
        "tag": tag,
    }


def testtuple_payload(
    traintuple_key: str,
    objective_key: str,
    dataset_key: Optional[str] = None,
    sample_keys: Sequence[str] = (),
    tag: Optional[str] = None,
) -> dict[str, Any]:
    return {
        "traintuple_key": traintuple_key,
        "objective_key": objective_key,
        "dataset_key": dataset_key,
        "sample_keys": list(sample_keys) or None,
        "tag": tag,
    }


# ---------------------------------------------------------------- payload helpers


def _invalid(detail: str) -> Rejection:
    return Rejection(Reason.INVALID_PAYLOAD, detail)


def _field(payload: Mapping[str, Any], name: str, types, *, optional: bool = False):
    if name not in payload or payload[name] is None:
        if optional:
            return None
        raise _invalid(f"missing field {name!r}")
    value = payload[name]
    if not isinstance(value, types) or isinstance(value, bool) and bool not in _as_tuple(types):
        raise _invalid(f"field {name!r} has wrong type")
    return value


def _as_tuple(types) -> tuple:
    return types if isinstance(types, tuple) else (types,)


def _hash_field(payload: Mapping[str, Any], name: str, *, optional: bool = False) -> Optional[ContentHash]:
    value = _field(payload, name, str, optional=optional)
    if value is None:
        return None
    try:
        return ContentHash(value)
    except ValueError:
        raise _invalid(f"field {name!r} is not a content hash") from None


def _hash_list(payload: Mapping[str, Any], name: str, *, optional: bool = False) -> tuple[ContentHash, ...]:
    value = _field(payload, name, list, optional=optional)
    if value is None:
        return ()
    try:
        keys = tuple(ContentHash(v) for v in value)
    except (ValueError, TypeError):
        raise _invalid(f"field {name!r} must list content hashes") from None
    if len(set(keys)) != len(keys):
        raise _invalid(f"field {name!r} contains duplicates")
    return keys


def _performance(payload: Mapping[str, Any], *, optional: bool) -> Optional[float]:
    value = payload.get("performance")
    if value is None:
        if optional:
            return None
        raise Rejection(Reason.MISSING_RESULT, "performance required")
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise _invalid("performance must be a finite number")
    return float(value)


def _regime(owner: NodeId, payload: Mapping[str, Any], default: Optional[PermissionRegime] = None) -> PermissionRegime:
    request = payload.get("permissions")
    if request is not None and not isinstance(request, Mapping):
        raise _invalid("permissions must be an object")
    try:
        return regime_from_request(owner, request, default)
    except (ValueError, TypeError) as exc:
        raise _invalid(f"bad permissions: {exc}") from None


def _log(payload: Mapping[str, Any]) -> str:
    log = payload.get("log") or ""
    if not isinstance(log, str):
        raise _invalid("log must be a string")
    return clip_log(log)


# ---------------------------------------------------------------- asset registration


def _register_objective(state: WorldState, creator: NodeId, payload, key: ContentHash) -> StateDelta:
    name = _field(payload, "name", str)
    metric = _field(payload, "metric", Mapping)
    try:
        metric_spec = MetricSpec(metric.get("kind"))
    except ValueError as exc:
        raise _invalid(str(exc)) from None
    metrics_hash = _hash_field(payload, "metrics_hash")
    raw_pairs = _field(payload, "test_samples", list, optional=True) or []
    pairs = []
    for pair in raw_pairs:
        if not isinstance(pair, list) or len(pair) != 2:
            raise _invalid("test_samples entries must be [sample_key, dataset_key]")
        try:
            pairs.append((ContentHash(pair[0]), ContentHash(pair[1])))
        except (ValueError, TypeError):
            raise _invalid("test_samples entries must be content hashes") from None
    if len({p[0] for p in pairs}) != len(pairs):
        raise _invalid("duplicate test sample")
    for sample_key, dataset_key in pairs:
        sample = state.samples.get(sample_key)
        dataset = state.datasets.get(dataset_key)
        if sample is None or dataset is None or dataset_key not in sample.dataset_keys:
            raise Rejection(Reason.UNKNOWN_ASSET, f"test sample {sample_key} in dataset {dataset_key}")
        if not sample.test_only:
            raise _invalid(f"sample {sample_key} is not flagged test-only")
        if dataset.owner != creator:
            raise Rejection(Reason.PERMISSION_DENIED, "objective test data must belong to the objective owner")
    objective = Objective(
        key=key,
        name=name,
        owner=creator,
        metric=metric_spec,
        metrics_hash=metrics_hash,
        test_samples=tuple(sorted(pairs)),
        permissions=_regime(creator, payload),
        description_hash=_hash_field(payload, "description_hash", optional=True),
    )
    delta = StateDelta()
    delta.put("objectives", objective)
    return delta


def _register_dataset(state: WorldState, creator: NodeId, payload, key: ContentHash) -> StateDelta:
    regime = _regime(creator, payload)
    if regime.download != {creator}:
        raise Rejection(Reason.PERMISSION_WIDEN, "datasets cannot grant download rights")
    objective_key = _hash_field(payload, "objective_key", optional=True)
    if objective_key is not None and objective_key not in state.objectives:
        raise Rejection(Reason.UNKNOWN_ASSET, f"objective {objective_key}")
    dataset = Dataset(
        key=key,
        name=_field(payload, "name", str),
        owner=creator,
        opener_hash=_hash_field(payload, "opener_hash"),
        data_type=_field(payload, "data_type", str, optional=True) or "tabular",
        permissions=regime,
        objective_key=objective_key,
        description_hash=_hash_field(payload, "description_hash", optional=True),
    )
    delta = StateDelta()
    delta.put("datasets", dataset)
    return delta


def _register_samples(state: WorldState, creator: NodeId, payload, key: ContentHash) -> StateDelta:
    dataset_key = _hash_field(payload, "dataset_key")
    dataset = state.datasets.get(dataset_key)
    if dataset is None:
        raise Rejection(Reason.UNKNOWN_ASSET, f"dataset {dataset_key}")
    if dataset.owner != creator:
        raise Rejection(Reason.PERMISSION_DENIED, "only the dataset owner can add samples")
    entries = _field(payload, "samples", list)
    if not entries:
        raise _invalid("no samples")
    delta = StateDelta()
    seen = set()
    for entry in entries:
        if not isinstance(entry, Mapping):
            raise _invalid("sample entries must be objects")
        sample_key = _hash_field(entry, "key")
        test_only = _field(entry, "test_only", bool)
        if sample_key in seen:
            raise _invalid(f"duplicate sample {sample_key}")
        seen.add(sample_key)
        existing = state.samples.get(sample_key)
        if existing is None:
            sample = DataSample(sample_key, creator, (dataset_key,), test_only)
        else:
            if existing.owner != creator:
                raise Rejection(Reason.PERMISSION_DENIED, f"sample {sample_key} belongs to {existing.owner}")
            if dataset_key in existing.dataset_keys:
                raise Rejection(Reason.ALREADY_EXISTS, f"sample {sample_key}")
            if existing.test_only != test_only:
                raise _invalid(f"sample {sample_key} test flag cannot change")
            sample = replace(existing, dataset_keys=existing.dataset_keys + (dataset_key,))
        delta.put("samples", sample)
    return delta


def _register_algorithm(state: WorldState, creator: NodeId, payload, key: ContentHash) -> StateDelta:
    kind = _field(payload, "kind", str)
    if kind not in ALGORITHM_KINDS:
        raise _invalid(f"unknown algorithm kind {kind!r}")
    objective_key = _hash_field(payload, "objective_key", optional=True)
    if objective_key is not None and objective_key not in state.objectives:
        raise Rejection(Reason.UNKNOWN_ASSET, f"objective {objective_key}")
    algorithm = Algorithm(
        key=key,
        name=_field(payload, "name", str),
        owner=creator,
        kind=kind,
        file_hash=_hash_field(payload, "file_hash"),
        permissions=_regime(creator, payload),
        objective_key=objective_key,
        description_hash=_hash_field(payload, "description_hash", optional=True),
    )
    delta = StateDelta()
    delta.put("algorithms", algorithm)
    return delta


def _update_permissions(state: WorldState, creator: NodeId, payload, key: ContentHash) -> StateDelta:
    asset_key = _hash_field(payload, "asset_key")
    delta = StateDelta()
    for collection in ("objectives", "datasets", "algorithms"):
        asset = state.collection(collection).get(asset_key)
        if asset is None:
            continue
        if asset.owner != creator:
            raise Rejection(Reason.PERMISSION_DENIED, "only the owner can change a permission regime")
        regime = _regime(creator, payload, asset.permissions)
        if collection == "datasets" and regime.download != {creator}:
            raise Rejection(Reason.PERMISSION_WIDEN, "datasets cannot grant download rights")
        delta.put(collection, replace(asset, permissions=regime))
        return delta
    tt = state.traintuples.get(asset_key)
    if tt is None:
        raise Rejection(Reason.UNKNOWN_ASSET, f"asset {asset_key}")
    # Output model of a traintuple. Its holder owns it and may release it further,
    # but never beyond what the algorithm and consumed models allow.
    if tt.worker != creator:
        raise Rejection(Reason.PERMISSION_DENIED, "only the model holder can change its regime")
    regime = _regime(creator, payload, tt.permissions)
    if not regime.narrower_or_equal(release_bound(state, tt)):
        raise Rejection(Reason.PERMISSION_WIDEN, "model permissions exceed its algorithm and input models")
    delta.put("traintuples", replace(tt, permissions=regime))
    return delta


def release_bound(state: WorldState, tt: Traintuple) -> PermissionRegime:
    """Widest regime a holder may give its output model: data rights excluded."""
    parents = tuple(state.traintuples[k] for k in tt.input_model_keys)
    regimes = [state.algorithms[tt.algorithm_key].permissions]
    model_regimes = consumed_model_regimes(state, tt.kind, parents)
    regimes += model_regimes[:1] if tt.kind == "composite" else model_regimes
    return intersect_permissions(regimes, holder=tt.worker)


# ---------------------------------------------------------------- tuples


def consumed_model_regimes(state: WorldState, tt_kind: str, inputs: tuple[Traintuple, ...]) -> list[PermissionRegime]:
    """Regimes of the model blobs a traintuple of ``tt_kind`` reads from ``inputs``."""
    regimes = []
    for pos, parent in enumerate(inputs):
        if tt_kind == "composite" and pos == 1:
            assert parent.head_permissions is not None
            regimes.append(parent.head_permissions)
        else:
            regimes.append(parent.permissions)
    return regimes


def _input_type_ok(kind: str, pos: int, parent: Traintuple) -> bool:
    if kind == "trainer":
        return parent.model_type == "plain"
    if kind == "composite":
        return parent.model_type in ("trunk", "composite") if pos == 0 else parent.model_type == "composite"
    return True


def _initial_status(parents) -> tuple[str, str]:
    failed = [p.key for p in parents if p.status == FAILED]
    if failed:
        return FAILED, clip_log(f"input {failed[0]} failed")
    if all(p.status == DONE for p in parents):
        return TODO, ""
    return WAITING, ""


def create_traintuple(state: WorldState, creator: NodeId, payload: Mapping[str, Any], key: Optional[ContentHash] = None) -> Traintuple:
    key = key or record_key(creator, CREATE_TRAINTUPLE, payload)
    if key in state.traintuples:
        raise Rejection(Reason.ALREADY_EXISTS, f"traintuple {key}")
    algorithm_key = _hash_field(payload, "algorithm_key")
    objective_key = _hash_field(payload, "objective_key")
    dataset_key = _hash_field(payload, "dataset_key", optional=True)
    sample_keys = _hash_list(payload, "sample_keys", optional=True)
    input_keys = _hash_list(payload, "input_model_keys", optional=True)
    tag = _field(payload, "tag", str, optional=True)

    algorithm = state.algorithms.get(algorithm_key)
    if algorithm is None:
        raise Rejection(Reason.UNKNOWN_ASSET, f"algorithm {algorithm_key}")
    objective = state.objectives.get(objective_key)
    if objective is None:
        raise Rejection(Reason.UNKNOWN_ASSET, f"objective {objective_key}")
    dataset = None
    if dataset_key is not None:
        dataset = state.datasets.get(dataset_key)
        if dataset is None:
            raise Rejection(Reason.UNKNOWN_ASSET, f"dataset {dataset_key}")
    samples = []
    for sk in sample_keys:
        sample = state.samples.get(sk)
        if sample is None or dataset_key not in sample.dataset_keys:
            raise Rejection(Reason.UNKNOWN_ASSET, f"sample {sk} in dataset {dataset_key}")
        samples.append(sample)
    parents = []
    for ik in input_keys:
        parent = state.traintuples.get(ik)
        if parent is None:
            raise Rejection(Reason.UNKNOWN_ASSET, f"input traintuple {ik}")
        parents.append(parent)
    parents = tuple(parents)

    kind = algorithm.kind
    if kind == "aggregator":
        if dataset is not None or sample_keys:
            raise Rejection(Reason.KIND_MISMATCH, "aggregation takes no data")
        if len(parents) < 2:
            raise Rejection(Reason.KIND_MISMATCH, "aggregation needs at least two input models")
        types = {("trunk" if p.model_type == "composite" else p.model_type) for p in parents}
        if len(types) != 1:
            raise Rejection(Reason.KIND_MISMATCH, "cannot aggregate models of different types")
        model_type = types.pop()
        worker = objective.owner
        eval_algorithm_key = parents[0].eval_algorithm_key
    else:
        if dataset is None or not sample_keys:
            raise Rejection(Reason.KIND_MISMATCH, f"{kind} traintuple needs a dataset and samples")
        max_inputs = 1 if kind == "trainer" else 2
        if len(parents) > max_inputs:
            raise Rejection(Reason.KIND_MISMATCH, f"{kind} traintuple takes at most {max_inputs} input models")
        for pos, parent in enumerate(parents):
            if not _input_type_ok(kind, pos, parent):
                raise Rejection(Reason.KIND_MISMATCH, f"input {parent.key} has model type {parent.model_type}")
        worker = dataset.owner
        if kind == "composite" and len(parents) == 2 and parents[1].worker != worker:
            raise Rejection(Reason.KIND_MISMATCH, "a head model is only trained where it is held")
        model_type = "plain" if kind == "trainer" else "composite"
        eval_algorithm_key = algorithm.key

    if any(s.test_only for s in samples):
        raise Rejection(Reason.TEST_DATA_SANCTUARY, "test-only samples cannot be used for training")

    model_regimes = consumed_model_regimes(state, kind, parents)
    checks: list[tuple[str, PermissionRegime, Optional[str]]] = [
        (f"objective {objective.key}", objective.permissions, None),
        (f"algorithm {algorithm.key}", algorithm.permissions, objective_key),
    ]
    if dataset is not None:
        checks.append((f"dataset {dataset.key}", dataset.permissions, objective_key))
    checks += [(f"model of {p.key}", r, objective_key) for p, r in zip(parents, model_regimes)]
    for what, regime, obj in checks:
        if not check_process_right(regime, creator, obj):
            raise Rejection(Reason.PERMISSION_DENIED, f"{creator} cannot process {what}")

    inherited = [algorithm.permissions]
    if dataset is not None:
        inherited.append(dataset.permissions)
    inherited += model_regimes[:1] if kind == "composite" else model_regimes
    default = intersect_permissions(inherited, holder=worker)
    permissions = _regime(worker, payload, default)
    if not permissions.narrower_or_equal(default):
        raise Rejection(Reason.PERMISSION_WIDEN, "requested model permissions exceed the inherited ones")
    head_permissions = None
    if kind == "composite":
        head_permissions = PermissionRegime(
            owner=worker, process=frozenset({worker, creator}), objective_whitelist=default.objective_whitelist
        )

    status, log = _initial_status(parents)
    return Traintuple(
        key=key,
        creator=creator,
        kind=kind,
        algorithm_key=algorithm_key,
        objective_key=objective_key,
        dataset_key=dataset_key,
        sample_keys=sample_keys,
        input_model_keys=input_keys,
        worker=worker,
        rank=0 if not parents else 1 + max(p.rank for p in parents),
        status=status,
        permissions=permissions,
        model_type=model_type,
        eval_algorithm_key=eval_algorithm_key,
        head_permissions=head_permissions,
        tag=tag,
        log=log,
    )


def create_testtuple(state: WorldState, creator: NodeId, payload: Mapping[str, Any], key: Optional[ContentHash] = None) -> Testtuple:
    key = key or record_key(creator, CREATE_TESTTUPLE, payload)
    if key in state.testtuples:
        raise Rejection(Reason.ALREADY_EXISTS, f"testtuple {key}")
    traintuple_key = _hash_field(payload, "traintuple_key")
    objective_key = _hash_field(payload, "objective_key")
    dataset_key = _hash_field(payload, "dataset_key", optional=True)
    sample_keys = _hash_list(payload, "sample_keys", optional=True)
    tag = _field(payload, "tag", str, optional=True)

    traintuple = state.traintuples.get(traintuple_key)
    if traintuple is None:
        raise Rejection(Reason.UNKNOWN_ASSET, f"traintuple {traintuple_key}")
    objective = state.objectives.get(objective_key)
    if objective is None:
        raise Rejection(Reason.UNKNOWN_ASSET, f"objective {objective_key}")
    dataset = None
    if sample_keys or dataset_key is not None:
        if dataset_key is None or not sample_keys:
            raise _invalid("custom evaluation needs both dataset_key and sample_keys")
        dataset = state.datasets.get(dataset_key)
        if dataset is None:
            raise Rejection(Reason.UNKNOWN_ASSET, f"dataset {dataset_key}")
        for sk in sample_keys:
            sample = state.samples.get(sk)
            if sample is None or dataset_key not in sample.dataset_keys:
                raise Rejection(Reason.UNKNOWN_ASSET, f"sample {sk} in dataset {dataset_key}")
        worker = dataset.owner
        certified = sorted((sk, dataset_key) for sk in sample_keys) == list(objective.test_samples)
    else:
        if not objective.test_samples:
            raise _invalid("objective has no test data; pass custom samples")
        worker = objective.owner
        dataset_key = None
        sample_keys = tuple(sk for sk, _ in objective.test_samples)
        certified = True

    if traintuple.model_type == "trunk":
        raise Rejection(Reason.KIND_MISMATCH, "a trunk alone cannot be evaluated")
    if traintuple.model_type == "composite" and worker != traintuple.worker:
        raise Rejection(Reason.KIND_MISMATCH, "a composite model is only evaluated where its head is held")

    checks = [(f"objective {objective.key}", objective.permissions, None)]
    checks.append((f"model of {traintuple.key}", traintuple.permissions, objective_key))
    if traintuple.head_permissions is not None:
        checks.append((f"head model of {traintuple.key}", traintuple.head_permissions, objective_key))
    if dataset is not None:
        checks.append((f"dataset {dataset.key}", dataset.permissions, objective_key))
    for what, regime, obj in checks:
        if not check_process_right(regime, creator, obj):
            raise Rejection(Reason.PERMISSION_DENIED, f"{creator} cannot process {what}")

    status, log = _initial_status((traintuple,))
    return Testtuple(
        key=key,
        creator=creator,
        traintuple_key=traintuple_key,
        objective_key=objective_key,
        algorithm_key=traintuple.eval_algorithm_key,
        dataset_key=dataset_key,
        sample_keys=sample_keys,
        worker=worker,
        certified=certified,
        status=status,
        tag=tag,
        log=log,
    )


def _create_traintuple_tx(state, creator, payload, key) -> StateDelta:
    delta = StateDelta()
    delta.put("traintuples", create_traintuple(state, creator, payload, key))
    return delta


def _create_testtuple_tx(state, creator, payload, key) -> StateDelta:
    delta = StateDelta()
    delta.put("testtuples", create_testtuple(state, creator, payload, key))
    return delta


# ---------------------------------------------------------------- status machine


def _propagate(state: WorldState, delta: StateDelta, root: Union[Traintuple, Testtuple]) -> None:
    """Flip newly-ready dependents to todo, or cascade a failure to all descendants."""
    current: dict[str, Union[Traintuple, Testtuple]] = {root.key: root}

    def get(k: str):
        return current.get(k) or state.tuple(k)

    def put(rec):
        current[rec.key] = rec
        delta.put("traintuples" if isinstance(rec, Traintuple) else "testtuples", rec)

    if root.status == DONE:
        for child_key in state.children.get(root.key, ()):
            child = get(child_key)
            if child.status != WAITING:
                continue
            parents = child.input_model_keys if isinstance(child, Traintuple) else (child.traintuple_key,)
            if all(get(p).status == DONE for p in parents):
                put(replace(child, status=TODO))
    elif root.status == FAILED:
        queue = deque([root.key])
        while queue:
            parent_key = queue.popleft()
            for child_key in state.children.get(parent_key, ()):
                child = get(child_key)
                if child.status in TERMINAL:
                    continue
                put(replace(child, status=FAILED, log=clip_log(f"input {parent_key} failed")))
                queue.append(child_key)


def update_status(state: WorldState, worker: NodeId, kind: str, payload: Mapping[str, Any]) -> StateDelta:
    tuple_key = _hash_field(payload, "tuple_key")
    record = state.tuple(tuple_key)
    if record is None:
        raise Rejection(Reason.UNKNOWN_ASSET, f"tuple {tuple_key}")
    if record.worker != worker:
        raise Rejection(Reason.NOT_WORKER, f"{worker} is not the worker of {tuple_key}")
    if kind == UPDATE_STATUS:
        new_status = _field(payload, "status", str)
        if new_status not in (DOING, FAILED):
            raise Rejection(Reason.ILLEGAL_TRANSITION, f"{new_status} cannot be set directly")
    elif kind == LOG_TRAIN_RESULT:
        if not isinstance(record, Traintuple):
            raise _invalid("LogTrainResult targets a traintuple")
        new_status = DONE
    else:
        if not isinstance(record, Testtuple):
            raise _invalid("LogTestResult targets a testtuple")
        new_status = DONE
    if new_status not in TRANSITIONS[record.status]:
        raise Rejection(Reason.ILLEGAL_TRANSITION, f"{record.status} -> {new_status}")

    log = _log(payload)
    if new_status == DOING:
        updated = replace(record, status=DOING)
    elif new_status == FAILED:
        if not log:
            raise Rejection(Reason.MISSING_RESULT, "a failure must carry a log")
        updated = replace(record, status=FAILED, log=log)
    elif isinstance(record, Traintuple):
        if payload.get("model_hash") is None:
            raise Rejection(Reason.MISSING_RESULT, "output model hash required")
        model_hash = _hash_field(payload, "model_hash")
        head_hash = _hash_field(payload, "head_model_hash", optional=True)
        if record.kind == "composite" and head_hash is None:
            raise Rejection(Reason.MISSING_RESULT, "composite traintuples report a head model")
        if record.kind != "composite" and head_hash is not None:
            raise _invalid("only composite traintuples report a head model")
        performance = _performance(payload, optional=record.kind == "aggregator")
        updated = replace(
            record, status=DONE, out_model=model_hash, out_head_model=head_hash, performance=performance, log=log
        )
    else:
        updated = replace(record, status=DONE, performance=_performance(payload, optional=False), log=log)

    delta = StateDelta()
    delta.put("traintuples" if isinstance(updated, Traintuple) else "testtuples", updated)
    _propagate(state, delta, updated)
    return delta


# ---------------------------------------------------------------- dispatch

_HANDLERS: dict[str, Callable[..., StateDelta]] = {
    REGISTER_OBJECTIVE: _register_objective,
    REGISTER_DATASET: _register_dataset,
    REGISTER_DATA_SAMPLES: _register_samples,
    REGISTER_ALGORITHM: _register_algorithm,
    CREATE_TRAINTUPLE: _create_traintuple_tx,
    CREATE_TESTTUPLE: _create_testtuple_tx,
    UPDATE_PERMISSIONS: _update_permissions,
}

_ASSET_COLLECTION = {
    REGISTER_OBJECTIVE: "objectives",
    REGISTER_DATASET: "datasets",
    REGISTER_ALGORITHM: "algorithms",
}


def apply_transaction(state: WorldState, tx) -> StateDelta:
    """Validate ``tx`` against ``state`` and return the records it writes.

    ``state`` is not modified. Raises :class:`Rejection` on any rule violation.
    """
    if tx.kind not in TX_KINDS:
        raise _invalid(f"unknown transaction kind {tx.kind!r}")
    if not isinstance(tx.payload, Mapping):
        raise _invalid("payload must be an object")
    if tx.kind in (UPDATE_STATUS, LOG_TRAIN_RESULT, LOG_TEST_RESULT):
        return update_status(state, tx.creator, tx.kind, tx.payload)
    key = record_key(tx.creator, tx.kind, tx.payload)
    collection = _ASSET_COLLECTION.get(tx.kind)
    if collection is not None and key in state.collection(collection):
        raise Rejection(Reason.ALREADY_EXISTS, f"{collection[:-1]} {key}")
    return _HANDLERS[tx.kind](state, tx.creator, tx.payload, key)


def leaderboard(state: WorldState, objective_key: str) -> list[tuple[ContentHash, float]]:
    """Certified, finished evaluations of an objective, best first."""
    objective = state.objectives.get(objective_key)
    if objective is None:
        raise Rejection(Reason.UNKNOWN_ASSET, f"objective {objective_key}")
    rows = [
        (t.traintuple_key, t.performance, t.key)
        for t in state.testtuples.values()
        if t.objective_key == objective_key and t.certified and t.status == DONE
    ]
    sign = -1.0 if objective.metric.higher_is_better else 1.0
    rows.sort(key=lambda r: (sign * r[1], r[0], r[2]))
    return [(r[0], r[1]) for r in rows]
