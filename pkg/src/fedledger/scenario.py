"""Scripted multi-node runs.

A scenario is a JSON document naming the nodes, the simulator settings and
an ordered list of events. Events refer to earlier results through ``$name``
strings: ``$dA`` is the key registered by the event with ``"id": "dA"``,
``$t1.model`` is the model produced by traintuple ``t1``, ``$plan.ref`` is
a tuple inside a submitted plan (``$plan.ref.head`` its head model) and
``$samples.0`` is the first key of a sample list.

Example::

    {"nodes": ["A", "B"], "orderer": "A", "seed": 7,
     "events": [
       {"op": "register_dataset", "as": "A", "id": "dA",
        "opener": {"feature_columns": ["x"], "label_column": "y"}},
       {"op": "add_data", "as": "A", "id": "trainA", "dataset": "$dA",
        "synthetic": {"n": 16, "family": "linear", "weights": [2.0], "bias": 1.0}}
     ]}
"""

from __future__ import annotations

import json
import logging
import os
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence, Union

import numpy as np

from . import ml, plans
from .chaincode import leaderboard
from .errors import AssetDenied, FedLedgerError, PlanError, Rejection, UnknownAsset
from .network import Envelope, Network

logger = logging.getLogger(__name__)

# markers avoid the hex alphabet so they cannot collide with keys or hashes in the trace
MARKER_ALPHABET = string.ascii_lowercase[6:22]  # g..v
MARKER_LEN = 16


class ScenarioError(FedLedgerError):
    """The scenario file is malformed or an event's expectation failed."""


def make_marker(rng: np.random.Generator) -> str:
    return "".join(MARKER_ALPHABET[i] for i in rng.integers(0, len(MARKER_ALPHABET), MARKER_LEN))


def synthetic_rows(
    n: int,
    weights: Sequence[float],
    bias: float = 0.0,
    family: str = "linear",
    noise: float = 0.0,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian features with a linear (or thresholded linear) response."""
    rng = np.random.default_rng(seed)
    w = np.asarray(weights, dtype=float)
    X = rng.standard_normal((n, w.size))
    z = X @ w + bias + noise * rng.standard_normal(n)
    y = (z > 0).astype(float) if family == "logistic" else z
    return X, y


@dataclass
class EventOutcome:
    index: int
    op: str
    ok: bool
    reason: Optional[str] = None
    detail: str = ""


@dataclass
class ScenarioResult:
    network: Network
    refs: dict[str, Any]
    outcomes: list[EventOutcome]
    markers: list[bytes] = field(default_factory=list)
    sample_blobs: list[bytes] = field(default_factory=list)
    plans: dict[str, plans.ResolvedPlan] = field(default_factory=dict)

    def key(self, name: str) -> Any:
        return self.refs[name]

    def leaderboards(self) -> dict[str, list[tuple[str, float]]]:
        state = self.network.nodes[self.network.orderer].state
        return {k: leaderboard(state, k) for k in sorted(state.objectives)}

    def model_hashes(self) -> dict[str, Any]:
        state = self.network.nodes[self.network.orderer].state
        return {k: [t.out_model, t.out_head_model] for k, t in sorted(state.traintuples.items())}

    def failures(self) -> list[EventOutcome]:
        return [o for o in self.outcomes if not o.ok]


class Scenario:
    def __init__(self, spec: Mapping[str, Any]) -> None:
        if not isinstance(spec, Mapping) or not spec.get("nodes"):
            raise ScenarioError("a scenario needs a non-empty 'nodes' list")
        self.spec = dict(spec)
        self.nodes = list(spec["nodes"])
        self.orderer = spec.get("orderer", self.nodes[0])
        self.seed = int(spec.get("seed", 0))
        self.events = list(spec.get("events", []))
        self.settle_default = bool(spec.get("settle", True))

    @classmethod
    def load(cls, path: Union[str, os.PathLike]) -> "Scenario":
        try:
            return cls(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: {exc}") from None

    def network(self, state_dir=None, failure_injector=None) -> Network:
        return Network(
            self.nodes,
            self.orderer,
            seed=self.seed,
            max_delay=int(self.spec.get("max_delay", 0)),
            fetch_timeout=int(self.spec.get("fetch_timeout", 3)),
            state_dir=state_dir,
            failure_injector=failure_injector,
        )

    def run(
        self,
        state_dir: Optional[Union[str, os.PathLike]] = None,
        failure_injector: Optional[Callable[[str, str], bool]] = None,
        max_ticks: int = 10_000,
    ) -> ScenarioResult:
        net = self.network(state_dir, failure_injector)
        runner = _Runner(self, net, max_ticks)
        for i, event in enumerate(self.events):
            runner.event(i, event)
        net.run_until_idle(max_ticks)
        return ScenarioResult(net, runner.refs, runner.outcomes, runner.markers, runner.blobs, runner.plans)


def run_scenario(spec: Union[Mapping[str, Any], str, os.PathLike], **kwargs) -> ScenarioResult:
    scenario = Scenario(spec) if isinstance(spec, Mapping) else Scenario.load(spec)
    return scenario.run(**kwargs)


class _Runner:
    def __init__(self, scenario: Scenario, net: Network, max_ticks: int) -> None:
        self.sc = scenario
        self.net = net
        self.max_ticks = max_ticks
        self.refs: dict[str, Any] = {}
        self.outcomes: list[EventOutcome] = []
        self.markers: list[bytes] = []
        self.blobs: list[bytes] = []
        self.plans: dict[str, plans.ResolvedPlan] = {}

    # ------------------------------------------------------------ references

    def ref(self, value: Any) -> Any:
        if isinstance(value, str) and value.startswith("$"):
            name, *rest = value[1:].split(".")
            if name in self.plans and rest:
                target: Any = self.plans[name][rest.pop(0)]
            elif name in self.refs:
                target = self.refs[name]
            else:
                raise ScenarioError(f"undefined reference {value}")
            for attr in rest:
                target = self._attr(value, target, attr)
            return target
        if isinstance(value, list):
            out: list = []
            for v in value:
                r = self.ref(v)
                # a sample-list reference inside a list splices in place
                if isinstance(v, str) and v.startswith("$") and isinstance(r, list):
                    out.extend(r)
                else:
                    out.append(r)
            return out
        if isinstance(value, dict):
            return {k: self.ref(v) for k, v in value.items()}
        return value

    def _attr(self, value: str, target: Any, attr: str) -> Any:
        if attr.isdigit() and isinstance(target, list):
            if int(attr) >= len(target):
                raise ScenarioError(f"{value}: index out of range")
            return target[int(attr)]
        if attr in ("model", "head"):
            tt = self.net.nodes[self.net.orderer].state.traintuples.get(target)
            if tt is None:
                raise ScenarioError(f"{value}: not a traintuple")
            return tt.out_model if attr == "model" else tt.out_head_model
        raise ScenarioError(f"unknown attribute {attr!r} in {value}")

    # ------------------------------------------------------------ dispatch

    def event(self, index: int, ev: Mapping[str, Any]) -> None:
        op = ev.get("op")
        handler = getattr(self, f"op_{op}", None)
        if handler is None:
            raise ScenarioError(f"event {index}: unknown op {op!r}")
        outcome = EventOutcome(index, op, True)
        try:
            handler(ev, outcome)
        except Rejection as exc:
            outcome.ok, outcome.reason, outcome.detail = False, exc.reason.value, exc.detail
        except AssetDenied as exc:
            outcome.ok, outcome.reason, outcome.detail = False, exc.reason, str(exc)
        except (UnknownAsset, PlanError) as exc:
            outcome.ok, outcome.reason, outcome.detail = False, type(exc).__name__, str(exc)
        self.outcomes.append(outcome)
        expect = ev.get("expect")
        got = "ok" if outcome.ok else outcome.reason
        if expect is not None and expect != got:
            raise ScenarioError(f"event {index} ({op}): expected {expect}, got {got} {outcome.detail}")
        if expect is None and not outcome.ok:
            logger.warning("event %d (%s) failed: %s %s", index, op, outcome.reason, outcome.detail)
        if ev.get("run"):
            self.net.run_until_idle(self.max_ticks)
        elif ev.get("ticks"):
            for _ in range(int(ev["ticks"])):
                self.net.step()

    def _submit(self, ev, outcome: EventOutcome, node: str, txs) -> Envelope:
        if txs is None:
            return None
        env = self.net.submit(node, txs)
        if ev.get("settle", self.sc.settle_default):
            self.net.settle(env, self.max_ticks)
            if env.status == "rejected":
                outcome.ok = False
                outcome.reason = env.rejection.reason.value
                outcome.detail = env.rejection.detail
        return env

    def _name(self, ev, value) -> None:
        if ev.get("id"):
            self.refs[ev["id"]] = value

    def _node(self, ev):
        return self.net.node(ev["as"])

    # ------------------------------------------------------------ ops

    def op_register_dataset(self, ev, outcome):
        node = self._node(ev)
        opener = ml.OpenerDescriptor.from_dict(ev["opener"])
        tx = node.register_dataset(
            ev.get("name", ev.get("id", "dataset")),
            opener,
            permissions=self.ref(ev.get("permissions")),
            objective_key=self.ref(ev.get("objective")),
            data_type=ev.get("data_type", "tabular"),
            description=ev.get("description"),
        )
        self._name(ev, tx.tx_id)
        self._submit(ev, outcome, node.id, tx)

    def op_register_algorithm(self, ev, outcome):
        node = self._node(ev)
        spec = ml.spec_from_dict(ev["spec"])
        tx = node.register_algorithm(
            ev.get("name", ev.get("id", "algorithm")), spec, permissions=self.ref(ev.get("permissions")), description=ev.get("description")
        )
        self._name(ev, tx.tx_id)
        self._submit(ev, outcome, node.id, tx)

    def op_register_objective(self, ev, outcome):
        node = self._node(ev)
        dataset = self.ref(ev.get("test_dataset"))
        samples = self.ref(ev.get("test_samples", []))
        tx = node.register_objective(
            ev.get("name", ev.get("id", "objective")),
            ev["metric"],
            [(s, dataset) for s in samples],
            permissions=self.ref(ev.get("permissions")),
            description=ev.get("description"),
        )
        self._name(ev, tx.tx_id)
        self._submit(ev, outcome, node.id, tx)

    def op_add_data(self, ev, outcome):
        node = self._node(ev)
        dataset_key = self.ref(ev["dataset"])
        opener = node.opener_for(dataset_key)
        rng = np.random.default_rng([self.sc.seed, len(self.blobs), len(self.outcomes)])
        if "synthetic" in ev:
            g = dict(ev["synthetic"])
            files = int(g.pop("files", 1))
            X, y = synthetic_rows(**g)
            chunks = [(X[idx], y[idx]) for idx in np.array_split(np.arange(len(y)), files)]
        elif "rows" in ev:
            chunks = []
            for block in ev["rows"]:
                arr = np.asarray(block, dtype=float)
                chunks.append((arr[:, :-1], arr[:, -1]))
        else:
            raise ScenarioError("add_data needs 'synthetic' or 'rows'")
        blobs = []
        for X, y in chunks:
            marker = make_marker(rng)
            self.markers.append(marker.encode())
            blobs.append(ml.samples_to_csv(opener, X, y, header_comment=f"marker {marker}"))
        self.blobs.extend(blobs)
        tx = node.register_local_data(blobs, dataset_key, bool(ev.get("test_only", False)))
        keys = [s["key"] for s in tx.payload["samples"]] if tx is not None else []
        self._name(ev, keys)
        self._submit(ev, outcome, node.id, tx)

    def op_train(self, ev, outcome):
        node = self._node(ev)
        tx = node.create_traintuple(
            self.ref(ev["algorithm"]),
            self.ref(ev["objective"]),
            self.ref(ev.get("dataset")),
            self.ref(ev.get("samples", [])),
            self.ref(ev.get("inputs", [])),
            permissions=self.ref(ev.get("permissions")),
            tag=ev.get("tag"),
        )
        self._name(ev, tx.tx_id)
        self._submit(ev, outcome, node.id, tx)

    def op_test(self, ev, outcome):
        node = self._node(ev)
        tx = node.create_testtuple(
            self.ref(ev["traintuple"]),
            self.ref(ev["objective"]),
            self.ref(ev.get("dataset")),
            self.ref(ev.get("samples", [])),
            tag=ev.get("tag"),
        )
        self._name(ev, tx.tx_id)
        self._submit(ev, outcome, node.id, tx)

    def op_plan(self, ev, outcome):
        node = self._node(ev)
        plan = self._build_plan(ev)
        resolved = plans.resolve(plan, node.id, node.state)
        if ev.get("id"):
            self.plans[ev["id"]] = resolved
        self._submit(ev, outcome, node.id, resolved.txs)

    def _build_plan(self, ev) -> plans.ComputePlan:
        if "plan" in ev:
            return plans.ComputePlan.from_dict(self.ref(ev["plan"]))
        builder = ev.get("builder")
        data = [(self.ref(d), self.ref(s)) for d, s in ev.get("datasets", [])]
        tag = ev.get("tag", builder)
        algorithm = self.ref(ev["algorithm"])
        objective = self.ref(ev["objective"])
        if builder == "sequential":
            plan = plans.build_sequential(data, algorithm, objective, tag=tag, init_model=self.ref(ev.get("init_model")))
        elif builder == "fedavg":
            plan = plans.build_fedavg(data, algorithm, self.ref(ev["aggregator"]), objective, ev["rounds"], tag=tag)
        elif builder == "composite_fedavg":
            plan = plans.build_composite_fedavg(data, algorithm, self.ref(ev["aggregator"]), objective, ev["rounds"], tag=tag)
        elif builder == "kfold":
            (dataset, samples), = data
            plan = plans.build_kfold(dataset, samples, algorithm, objective, ev["k"], tag=tag)
        else:
            raise ScenarioError(f"unknown plan builder {builder!r}")
        if ev.get("evaluate"):
            plan = plans.attach_evaluation(plan, objective, ev["evaluate"])
        return plan

    def op_update_permissions(self, ev, outcome):
        node = self._node(ev)
        tx = node.update_permissions(self.ref(ev["asset"]), self.ref(ev["permissions"]))
        self._submit(ev, outcome, node.id, tx)

    def op_download(self, ev, outcome):
        data = self.net.download(ev["as"], ev["from"], self.ref(ev["key"]))
        outcome.detail = f"{len(data)} bytes"

    def op_partition(self, ev, outcome):
        self.net.partition(ev["node"])

    def op_heal(self, ev, outcome):
        self.net.heal(ev["node"])

    def op_remove(self, ev, outcome):
        self.net.remove(ev["node"])

    def op_run(self, ev, outcome):
        if ev.get("ticks"):
            return  # handled after dispatch
        self.net.run_until_idle(self.max_ticks)


__all__ = [
    "EventOutcome",
    "Scenario",
    "ScenarioError",
    "ScenarioResult",
    "make_marker",
    "run_scenario",
    "synthetic_rows",
]
