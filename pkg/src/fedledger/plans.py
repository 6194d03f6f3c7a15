"""Compute plans: tagged DAGs of traintuples and testtuples.

Plans are built from symbolic references (``ref``) so they can be written by
hand or generated before any key exists. ``resolve`` turns a plan into the
ordered transactions of a single ledger envelope; keys are computed client-side
because a tuple's key is the hash of its creation transaction.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from statistics import fmean
from typing import TYPE_CHECKING, Any, Iterable, Mapping, Optional, Sequence, Union

from . import chaincode as cc
from .errors import BadRounds, CyclicPlan, EmptyPlan, PlanError, UnknownRef
from .ledger import Transaction
from .ml import kfold_split
from .state import DONE, WorldState

if TYPE_CHECKING:
    from .network import Envelope, Network

_HEX64 = re.compile(r"[0-9a-f]{64}")

DataRef = tuple[str, Sequence[str]]  # (dataset key, sample keys)


@dataclass(frozen=True)
class TrainStep:
    ref: str
    algorithm: str
    objective: str
    dataset: Optional[str] = None
    samples: tuple[str, ...] = ()
    inputs: tuple[str, ...] = ()
    permissions: Optional[Mapping[str, Any]] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "inputs", tuple(self.inputs))

    @property
    def depends_on(self) -> tuple[str, ...]:
        return self.inputs

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"ref": self.ref, "type": "train", "algorithm": self.algorithm, "objective": self.objective}
        if self.dataset is not None:
            d["dataset"] = self.dataset
        if self.samples:
            d["samples"] = list(self.samples)
        if self.inputs:
            d["inputs"] = list(self.inputs)
        if self.permissions is not None:
            d["permissions"] = dict(self.permissions)
        return d


@dataclass(frozen=True)
class TestStep:
    ref: str
    traintuple: str
    objective: str
    dataset: Optional[str] = None
    samples: tuple[str, ...] = ()

    __test__ = False  # not a pytest class

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", tuple(self.samples))

    @property
    def depends_on(self) -> tuple[str, ...]:
        return (self.traintuple,)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"ref": self.ref, "type": "test", "traintuple": self.traintuple, "objective": self.objective}
        if self.dataset is not None:
            d["dataset"] = self.dataset
        if self.samples:
            d["samples"] = list(self.samples)
        return d


Step = Union[TrainStep, TestStep]


@dataclass(frozen=True)
class ComputePlan:
    tag: str
    steps: tuple[Step, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))

    def __len__(self) -> int:
        return len(self.steps)

    def refs(self) -> list[str]:
        return [s.ref for s in self.steps]

    def step(self, ref: str) -> Step:
        for s in self.steps:
            if s.ref == ref:
                return s
        raise UnknownRef(ref)

    def train_steps(self) -> list[TrainStep]:
        return [s for s in self.steps if isinstance(s, TrainStep)]

    def test_steps(self) -> list[TestStep]:
        return [s for s in self.steps if isinstance(s, TestStep)]

    def extend(self, steps: Iterable[Step]) -> "ComputePlan":
        return ComputePlan(self.tag, self.steps + tuple(steps))

    def to_dict(self) -> dict[str, Any]:
        return {"tag": self.tag, "steps": [s.to_dict() for s in self.steps]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ComputePlan":
        if not isinstance(d, Mapping) or not isinstance(d.get("tag"), str):
            raise PlanError("a plan needs a string 'tag'")
        steps: list[Step] = []
        for raw in d.get("steps", []):
            raw = dict(raw)
            kind = raw.pop("type", None)
            try:
                if kind == "train":
                    steps.append(TrainStep(**raw))
                elif kind == "test":
                    steps.append(TestStep(**raw))
                else:
                    raise PlanError(f"step type must be 'train' or 'test', got {kind!r}")
            except TypeError as exc:
                raise PlanError(f"bad step {raw.get('ref')!r}: {exc}") from None
        return cls(d["tag"], tuple(steps))


def load_plan(path: Union[str, os.PathLike]) -> ComputePlan:
    try:
        return ComputePlan.from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise PlanError(f"{path}: {exc}") from None


def save_plan(plan: ComputePlan, path: Union[str, os.PathLike]) -> None:
    Path(path).write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- validation


def is_external(ref: str) -> bool:
    """A reference that is not a plan symbol must be a concrete traintuple key."""
    return bool(_HEX64.fullmatch(ref))


def validate_plan(plan: ComputePlan, state: Optional[WorldState] = None) -> list[str]:
    """Check references and acyclicity; returns refs in a dependency-respecting order.

    External keys are checked against ``state`` when given.
    """
    if not plan.steps:
        raise EmptyPlan("plan has no steps")
    by_ref: dict[str, Step] = {}
    for s in plan.steps:
        if s.ref in by_ref:
            raise PlanError(f"duplicate ref {s.ref!r}")
        by_ref[s.ref] = s
    for s in plan.steps:
        for dep in s.depends_on:
            if dep in by_ref:
                if not isinstance(by_ref[dep], TrainStep):
                    raise UnknownRef(f"{s.ref} depends on {dep!r}, which is not a training step")
            elif not is_external(dep):
                raise UnknownRef(f"{s.ref} depends on undefined {dep!r}")
            elif state is not None and dep not in state.traintuples:
                raise UnknownRef(f"{s.ref} depends on unknown traintuple {dep}")
    return _topological(plan, by_ref)


def _topological(plan: ComputePlan, by_ref: Mapping[str, Step]) -> list[str]:
    # Kahn's algorithm; ties keep declaration order so resolution is deterministic
    indeg = {s.ref: 0 for s in plan.steps}
    users: dict[str, list[str]] = {s.ref: [] for s in plan.steps}
    for s in plan.steps:
        for dep in set(s.depends_on):
            if dep in by_ref:
                indeg[s.ref] += 1
                users[dep].append(s.ref)
    position = {ref: i for i, ref in enumerate(by_ref)}
    ready = sorted((r for r, d in indeg.items() if d == 0), key=position.get)
    order: list[str] = []
    while ready:
        ref = ready.pop(0)
        order.append(ref)
        for u in users[ref]:
            indeg[u] -= 1
            if indeg[u] == 0:
                ready.append(u)
        ready.sort(key=position.get)
    if len(order) != len(plan.steps):
        stuck = sorted(r for r, d in indeg.items() if d > 0)
        raise CyclicPlan(f"dependency cycle among {stuck}")
    return order


@dataclass(frozen=True)
class ResolvedPlan:
    txs: tuple[Transaction, ...]
    keys: Mapping[str, str]

    def __getitem__(self, ref: str) -> str:
        return self.keys[ref]


def resolve(plan: ComputePlan, creator: str, state: Optional[WorldState] = None) -> ResolvedPlan:
    """Turn symbolic refs into keys and return the transactions in submission order."""
    order = validate_plan(plan, state)
    keys: dict[str, str] = {}
    txs = []

    def key_of(ref: str) -> str:
        return keys.get(ref, ref)

    for ref in order:
        s = plan.step(ref)
        if isinstance(s, TrainStep):
            payload = cc.traintuple_payload(
                s.algorithm, s.objective, s.dataset, s.samples, [key_of(i) for i in s.inputs], s.permissions, plan.tag
            )
            tx = Transaction(creator, cc.CREATE_TRAINTUPLE, payload)
        else:
            payload = cc.testtuple_payload(key_of(s.traintuple), s.objective, s.dataset, s.samples, plan.tag)
            tx = Transaction(creator, cc.CREATE_TESTTUPLE, payload)
        twin = next((r for r, k in keys.items() if k == tx.tx_id), None)
        if twin is not None:
            raise PlanError(f"steps {twin!r} and {ref!r} describe the same task")
        keys[ref] = tx.tx_id
        txs.append(tx)
    return ResolvedPlan(tuple(txs), keys)


def submit_plan(net: "Network", creator: str, plan: ComputePlan) -> tuple["Envelope", ResolvedPlan]:
    """Submit the whole plan as one envelope: it is committed or rejected atomically."""
    resolved = resolve(plan, creator, net.node(creator).state)
    return net.submit(creator, resolved.txs), resolved


# ---------------------------------------------------------------- builders


def _need(datasets: Sequence[Any], minimum: int, what: str) -> None:
    if len(datasets) < minimum:
        raise EmptyPlan(f"{what} needs at least {minimum} dataset(s), got {len(datasets)}")


def _check_rounds(rounds: int) -> None:
    if isinstance(rounds, bool) or not isinstance(rounds, int) or rounds < 1:
        raise BadRounds(f"rounds must be a positive integer, got {rounds!r}")


def build_sequential(
    datasets: Sequence[DataRef],
    algorithm: str,
    objective: str,
    *,
    tag: str = "sequential",
    init_model: Optional[str] = None,
) -> ComputePlan:
    """Train one model successively on each dataset, in the given order."""
    _need(datasets, 1, "a sequential plan")
    steps = []
    prev = init_model
    for i, (dataset, samples) in enumerate(datasets):
        ref = f"train-{i}"
        steps.append(TrainStep(ref, algorithm, objective, dataset, tuple(samples), (prev,) if prev else ()))
        prev = ref
    return ComputePlan(tag, tuple(steps))


def build_fedavg(
    datasets: Sequence[DataRef],
    algorithm: str,
    aggregator: str,
    objective: str,
    rounds: int,
    *,
    tag: str = "fedavg",
) -> ComputePlan:
    """Parallel local training on every dataset, then averaging, ``rounds`` times."""
    _need(datasets, 2, "federated averaging")
    _check_rounds(rounds)
    steps: list[Step] = []
    prev_agg: Optional[str] = None
    for r in range(rounds):
        trained = []
        for i, (dataset, samples) in enumerate(datasets):
            ref = f"r{r}-train-{i}"
            steps.append(TrainStep(ref, algorithm, objective, dataset, tuple(samples), (prev_agg,) if prev_agg else ()))
            trained.append(ref)
        prev_agg = f"r{r}-agg"
        steps.append(TrainStep(prev_agg, aggregator, objective, inputs=tuple(trained)))
    return ComputePlan(tag, tuple(steps))


def build_composite_fedavg(
    partners: Sequence[DataRef],
    algorithm: str,
    aggregator: str,
    objective: str,
    rounds: int,
    *,
    tag: str = "composite-fedavg",
) -> ComputePlan:
    """Shared trunk averaged across partners; each head stays with its partner."""
    _need(partners, 2, "a composite federated plan")
    _check_rounds(rounds)
    steps: list[Step] = []
    prev_agg: Optional[str] = None
    prev_local: list[Optional[str]] = [None] * len(partners)
    for r in range(rounds):
        trained = []
        for i, (dataset, samples) in enumerate(partners):
            ref = f"r{r}-composite-{i}"
            inputs = (prev_agg, prev_local[i]) if prev_agg else ()
            steps.append(TrainStep(ref, algorithm, objective, dataset, tuple(samples), inputs))
            trained.append(ref)
            prev_local[i] = ref
        prev_agg = f"r{r}-agg"
        steps.append(TrainStep(prev_agg, aggregator, objective, inputs=tuple(trained)))
    return ComputePlan(tag, tuple(steps))


def attach_evaluation(
    plan: ComputePlan,
    objective: str,
    after: Sequence[str],
    *,
    dataset: Optional[str] = None,
    samples: Sequence[str] = (),
) -> ComputePlan:
    """Append one testtuple per named training step.

    Without ``dataset`` the evaluation is certified: it runs on the objective's
    own test set, on the objective owner's node.
    """
    train_refs = {s.ref for s in plan.train_steps()}
    taken = set(plan.refs())
    new = []
    for ref in after:
        if ref not in train_refs:
            raise UnknownRef(f"no training step named {ref!r}")
        name = f"eval-{ref}"
        n = 1
        while name in taken:
            n += 1
            name = f"eval-{ref}-{n}"
        taken.add(name)
        new.append(TestStep(name, ref, objective, dataset, tuple(samples)))
    return plan.extend(new)


def build_kfold(
    dataset: str,
    sample_keys: Sequence[str],
    algorithm: str,
    objective: str,
    k: int,
    *,
    tag: str = "kfold",
) -> ComputePlan:
    """k independent train/test pairs over contiguous folds of ``sample_keys``."""
    steps: list[Step] = []
    for i, (train, test) in enumerate(kfold_split(sample_keys, k)):
        steps.append(TrainStep(f"fold-{i}", algorithm, objective, dataset, tuple(train)))
        steps.append(TestStep(f"fold-{i}-test", f"fold-{i}", objective, dataset, tuple(test)))
    return ComputePlan(tag, tuple(steps))


def kfold_summary(state: WorldState, resolved: ResolvedPlan) -> float:
    """Mean fold performance, read from the ledger state."""
    perfs = []
    for ref, key in sorted(resolved.keys.items()):
        if not ref.endswith("-test"):
            continue
        tt = state.testtuples.get(key)
        if tt is None or tt.status != DONE:
            raise PlanError(f"fold {ref} has not finished")
        perfs.append(tt.performance)
    if not perfs:
        raise EmptyPlan("plan has no fold evaluations")
    return fmean(perfs)


__all__ = [
    "ComputePlan",
    "ResolvedPlan",
    "TestStep",
    "TrainStep",
    "attach_evaluation",
    "build_composite_fedavg",
    "build_fedavg",
    "build_kfold",
    "build_sequential",
    "kfold_summary",
    "load_plan",
    "resolve",
    "save_plan",
    "submit_plan",
    "validate_plan",
]
