"""World state: the asset and tuple view obtained by replaying the ledger."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterator, Optional, Union

from .assets import Algorithm, DataSample, Dataset, ModelRecord, NodeId, Objective, PermissionRegime
from .hashing import ContentHash, canonical_json, digest

WAITING = "waiting"
TODO = "todo"
DOING = "doing"
DONE = "done"
FAILED = "failed"
STATUSES = (WAITING, TODO, DOING, DONE, FAILED)
TERMINAL = frozenset({DONE, FAILED})

# Legal status edges. A tuple is born waiting, todo, or failed (when an input
# has already failed).
TRANSITIONS: dict[Optional[str], frozenset[str]] = {
    None: frozenset({WAITING, TODO, FAILED}),
    WAITING: frozenset({TODO, FAILED}),
    TODO: frozenset({DOING}),
    DOING: frozenset({DONE, FAILED}),
    DONE: frozenset(),
    FAILED: frozenset(),
}

LOG_LIMIT = 4096
_TRUNCATION_MARKER = "...[truncated]"


def clip_log(text: str) -> str:
    """Bound a log to LOG_LIMIT UTF-8 bytes, marking the cut."""
    raw = text.encode("utf-8")
    if len(raw) <= LOG_LIMIT:
        return text
    room = LOG_LIMIT - len(_TRUNCATION_MARKER.encode("utf-8"))
    return raw[:room].decode("utf-8", errors="ignore") + _TRUNCATION_MARKER


@dataclass(frozen=True)
class Traintuple:
    key: ContentHash
    creator: NodeId
    kind: str  # trainer | aggregator | composite
    algorithm_key: ContentHash
    objective_key: ContentHash
    dataset_key: Optional[ContentHash]
    sample_keys: tuple[ContentHash, ...]
    input_model_keys: tuple[ContentHash, ...]
    worker: NodeId
    rank: int
    status: str
    permissions: PermissionRegime
    model_type: str  # plain | trunk | composite
    eval_algorithm_key: ContentHash
    head_permissions: Optional[PermissionRegime] = None
    tag: Optional[str] = None
    out_model: Optional[ContentHash] = None
    out_head_model: Optional[ContentHash] = None
    performance: Optional[float] = None
    log: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "key": self.key,
            "creator": self.creator,
            "kind": self.kind,
            "algorithm_key": self.algorithm_key,
            "objective_key": self.objective_key,
            "dataset_key": self.dataset_key,
            "sample_keys": list(self.sample_keys),
            "input_model_keys": list(self.input_model_keys),
            "worker": self.worker,
            "rank": self.rank,
            "status": self.status,
            "permissions": self.permissions.to_dict(),
            "model_type": self.model_type,
            "eval_algorithm_key": self.eval_algorithm_key,
            "head_permissions": None if self.head_permissions is None else self.head_permissions.to_dict(),
            "tag": self.tag,
            "out_model": self.out_model,
            "out_head_model": self.out_head_model,
            "performance": self.performance,
            "log": self.log,
        }

    def output_models(self) -> list[ModelRecord]:
        out = []
        if self.out_model is not None:
            role = "trunk" if self.kind == "composite" else "model"
            out.append(ModelRecord(self.out_model, self.key, self.worker, self.permissions, role))
        if self.out_head_model is not None:
            assert self.head_permissions is not None
            out.append(ModelRecord(self.out_head_model, self.key, self.worker, self.head_permissions, "head"))
        return out


@dataclass(frozen=True)
class Testtuple:
    key: ContentHash
    creator: NodeId
    traintuple_key: ContentHash
    objective_key: ContentHash
    algorithm_key: ContentHash
    dataset_key: Optional[ContentHash]
    sample_keys: tuple[ContentHash, ...]
    worker: NodeId
    certified: bool
    status: str
    tag: Optional[str] = None
    performance: Optional[float] = None
    log: str = ""

    __test__ = False  # keeps pytest from collecting the class

    @property
    def reported_status(self) -> str:
        """Status on the four-state scale used for testtuple reports (doing reads as todo)."""
        return TODO if self.status == DOING else self.status

    def to_dict(self) -> dict[str, Any]:
        return {
            "key": self.key,
            "creator": self.creator,
            "traintuple_key": self.traintuple_key,
            "objective_key": self.objective_key,
            "algorithm_key": self.algorithm_key,
            "dataset_key": self.dataset_key,
            "sample_keys": list(self.sample_keys),
            "worker": self.worker,
            "certified": self.certified,
            "status": self.status,
            "tag": self.tag,
            "performance": self.performance,
            "log": self.log,
        }


Record = Union[Objective, Dataset, DataSample, Algorithm, Traintuple, Testtuple]

COLLECTIONS = ("objectives", "datasets", "samples", "algorithms", "traintuples", "testtuples")


@dataclass
class StateDelta:
    """Records written by one transaction, plus the status changes it caused."""

    changes: dict[tuple[str, str], Record] = field(default_factory=dict)
    status_events: list[tuple[str, str]] = field(default_factory=list)

    def put(self, collection: str, record: Record) -> None:
        self.changes[(collection, record.key)] = record
        if isinstance(record, (Traintuple, Testtuple)):
            self.status_events.append((record.key, record.status))


class WorldState:
    def __init__(self) -> None:
        self.objectives: dict[str, Objective] = {}
        self.datasets: dict[str, Dataset] = {}
        self.samples: dict[str, DataSample] = {}
        self.algorithms: dict[str, Algorithm] = {}
        self.traintuples: dict[str, Traintuple] = {}
        self.testtuples: dict[str, Testtuple] = {}
        # derived indexes, rebuilt incrementally
        self.children: dict[str, list[str]] = {}
        self.models: dict[str, list[ModelRecord]] = {}

    def copy(self) -> "WorldState":
        new = WorldState()
        for name in COLLECTIONS:
            setattr(new, name, dict(getattr(self, name)))
        new.children = {k: list(v) for k, v in self.children.items()}
        new.models = {k: list(v) for k, v in self.models.items()}
        return new

    def collection(self, name: str) -> dict[str, Any]:
        if name not in COLLECTIONS:
            raise KeyError(name)
        return getattr(self, name)

    def apply(self, delta: StateDelta) -> None:
        for (name, key), record in delta.changes.items():
            coll = self.collection(name)
            is_new = key not in coll
            coll[key] = record
            if isinstance(record, Traintuple):
                if is_new:
                    for parent in record.input_model_keys:
                        self.children.setdefault(parent, []).append(key)
                for model in record.output_models():
                    recs = self.models.setdefault(model.key, [])
                    ident = (model.producing_tuple, model.role)
                    recs[:] = [r for r in recs if (r.producing_tuple, r.role) != ident] + [model]
            elif isinstance(record, Testtuple) and is_new:
                self.children.setdefault(record.traintuple_key, []).append(key)

    def tuple(self, key: str) -> Union[Traintuple, Testtuple, None]:
        return self.traintuples.get(key) or self.testtuples.get(key)

    def iter_tuples(self) -> Iterator[Union[Traintuple, Testtuple]]:
        yield from self.traintuples.values()
        yield from self.testtuples.values()

    def model_records(self, model_hash: str) -> list[ModelRecord]:
        return list(self.models.get(model_hash, ()))

    def to_dict(self) -> dict[str, Any]:
        return {
            name: {k: rec.to_dict() for k, rec in sorted(getattr(self, name).items())}
            for name in COLLECTIONS
        }

    def serialize(self) -> bytes:
        return canonical_json(self.to_dict())

    def digest(self) -> ContentHash:
        return digest(self.serialize())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, WorldState):
            return NotImplemented
        return self.serialize() == other.serialize()

    __hash__ = None  # type: ignore[assignment]
