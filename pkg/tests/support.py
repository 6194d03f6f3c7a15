"""Shared builders for the test suite."""

from __future__ import annotations

from typing import Any, Iterable, Optional, Sequence

import numpy as np

from fedledger import chaincode as cc
from fedledger import ml
from fedledger.chaincode import apply_transaction
from fedledger.errors import Rejection
from fedledger.hashing import digest
from fedledger.ledger import Transaction
from fedledger.network import Envelope, Network
from fedledger.scenario import make_marker
from fedledger.state import DOING, WorldState

OPENER = ml.OpenerDescriptor(("x1", "x2"), "y")
TRUE_W = (1.5, -2.0)
TRUE_B = 0.3
ALL = ["A", "B", "C"]


def csv_blobs(
    X: np.ndarray,
    y: np.ndarray,
    files: int = 1,
    *,
    opener: ml.OpenerDescriptor = OPENER,
    rng: Optional[np.random.Generator] = None,
    markers: Optional[list] = None,
) -> list[bytes]:
    """Split rows into ``files`` CSV blobs, each carrying a unique marker comment."""
    rng = rng if rng is not None else np.random.default_rng(0)
    blobs = []
    for idx in np.array_split(np.arange(len(y)), files):
        marker = make_marker(rng)
        if markers is not None:
            markers.append(marker.encode())
        blobs.append(ml.samples_to_csv(opener, X[idx], y[idx], header_comment=f"marker {marker}"))
    return blobs


def linear_data(n: int, seed: int = 0, *, logistic: bool = False, noise: float = 0.0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 2))
    z = X @ np.array(TRUE_W) + TRUE_B + noise * rng.standard_normal(n)
    return X, ((z > 0).astype(float) if logistic else z)


class StateBuilder:
    """Applies transactions straight through the chaincode, no network involved."""

    def __init__(self) -> None:
        self.state = WorldState()

    def apply(self, creator: str, kind: str, payload: dict[str, Any]) -> str:
        tx = Transaction(creator, kind, {k: v for k, v in payload.items() if v is not None})
        self.state.apply(apply_transaction(self.state, tx))
        return tx.tx_id

    def apply_tx(self, tx: Transaction) -> str:
        self.state.apply(apply_transaction(self.state, tx))
        return tx.tx_id

    def reject(self, creator: str, kind: str, payload: dict[str, Any]) -> str:
        tx = Transaction(creator, kind, {k: v for k, v in payload.items() if v is not None})
        try:
            apply_transaction(self.state, tx)
        except Rejection as exc:
            return exc.reason.value
        raise AssertionError(f"{kind} by {creator} was accepted")


def sample_keys(tag, n):
    return [digest(f"{tag}-{i}".encode()) for i in range(n)]


class World(StateBuilder):
    """A, B hold training data; C owns the objective and its test data."""

    def __init__(self, dataset_process=ALL, algo_process=ALL):
        super().__init__()
        self.dA = self.dataset("A", dataset_process)
        self.trainA = self.samples("A", self.dA, sample_keys("a", 4))
        self.testA = self.samples("A", self.dA, sample_keys("a-test", 2), test_only=True)
        self.dB = self.dataset("B", dataset_process)
        self.trainB = self.samples("B", self.dB, sample_keys("b", 4))
        self.dC = self.dataset("C", ALL)
        self.testC = self.samples("C", self.dC, sample_keys("c-test", 2), test_only=True)
        self.obj = self.apply(
            "C",
            cc.REGISTER_OBJECTIVE,
            {
                "name": "objective",
                "metric": {"kind": "accuracy"},
                "metrics_hash": digest(b"metrics"),
                "test_samples": [[s, self.dC] for s in sorted(self.testC)],
                "permissions": {"process": ALL},
            },
        )
        self.algo = self.algorithm("B", "trainer", algo_process)
        self.agg = self.algorithm("C", "aggregator", ALL)
        self.comp = self.algorithm("B", "composite", ALL)

    def dataset(self, owner, process):
        payload = {"name": f"d{owner}", "opener_hash": digest(b"opener"), "permissions": {"process": list(process)}}
        return self.apply(owner, cc.REGISTER_DATASET, payload)

    def samples(self, owner, ds, keys, test_only=False):
        self.apply(owner, cc.REGISTER_DATA_SAMPLES, {"dataset_key": ds, "samples": [{"key": k, "test_only": test_only} for k in keys]})
        return keys

    def algorithm(self, owner, kind, process):
        payload = {"name": f"{kind}-{owner}", "kind": kind, "file_hash": digest(kind.encode()), "permissions": {"process": list(process)}}
        return self.apply(owner, cc.REGISTER_ALGORITHM, payload)

    def train_payload(self, ds="A", inputs=(), algo=None, samples=None, permissions=None, tag=None):
        if ds is None:
            dataset, samples = None, ()
        else:
            dataset = {"A": self.dA, "B": self.dB}[ds]
            samples = samples if samples is not None else {"A": self.trainA, "B": self.trainB}[ds]
        return cc.traintuple_payload(algo or self.algo, self.obj, dataset, samples, inputs, permissions, tag)

    def train(self, creator="B", **kw):
        return self.apply(creator, cc.CREATE_TRAINTUPLE, self.train_payload(**kw))

    def status(self, worker, key, status, log=None):
        return self.apply(worker, cc.UPDATE_STATUS, {"tuple_key": key, "status": status, "log": log})

    def finish(self, key, perf=0.5, head=False):
        t = self.state.tuple(key)
        self.status(t.worker, key, DOING)
        if key in self.state.traintuples:
            payload = {"tuple_key": key, "model_hash": digest(key.encode()), "performance": perf}
            if head:
                payload["head_model_hash"] = digest(b"head" + key.encode())
            self.apply(t.worker, cc.LOG_TRAIN_RESULT, payload)
        else:
            self.apply(t.worker, cc.LOG_TEST_RESULT, {"tuple_key": key, "performance": perf})


class Sim:
    """Thin synchronous driver over a Network, for readable tests."""

    def __init__(self, nodes: Sequence[str] = ("A", "B", "C"), orderer: Optional[str] = None, **kwargs) -> None:
        self.net = Network(list(nodes), orderer, **kwargs)
        self.markers: list[bytes] = []
        self.blobs: list[bytes] = []
        self._rng = np.random.default_rng(1234)

    def __getitem__(self, node_id: str):
        return self.net.nodes[node_id]

    @property
    def state(self) -> WorldState:
        return self.net.nodes[self.net.orderer].state

    def submit(self, node: str, txs) -> Envelope:
        return self.net.settle(self.net.submit(node, txs))

    def ok(self, node: str, txs) -> Any:
        env = self.submit(node, txs)
        assert env.status == "committed", env.rejection
        return env.txs[0].tx_id if len(env.txs) == 1 else [tx.tx_id for tx in env.txs]

    def reason(self, node: str, txs) -> str:
        env = self.submit(node, txs)
        assert env.status == "rejected", f"expected a rejection, got {env.status}"
        return env.rejection.reason.value

    def run(self) -> int:
        return self.net.run_until_idle()

    def dataset(
        self,
        owner: str,
        *,
        process: Iterable[str] = (),
        n_train: int = 12,
        n_test: int = 0,
        files: int = 3,
        seed: int = 0,
        logistic: bool = False,
        objectives: Optional[Sequence[str]] = None,
    ) -> tuple[str, list[str], list[str]]:
        """Register a dataset with train (and optionally test) samples; returns keys."""
        node = self[owner]
        perms: dict[str, Any] = {"process": sorted({owner, *process})}
        if objectives is not None:
            perms["objectives"] = list(objectives)
        ds = self.ok(owner, node.register_dataset(f"data-{owner}-{seed}", OPENER, permissions=perms))
        X, y = linear_data(n_train + n_test, seed, logistic=logistic)
        train_blobs = csv_blobs(X[:n_train], y[:n_train], files, rng=self._rng, markers=self.markers)
        self.blobs += train_blobs
        train = self._samples(owner, train_blobs, ds, False)
        test: list[str] = []
        if n_test:
            test_blobs = csv_blobs(X[n_train:], y[n_train:], max(1, files // 2), rng=self._rng, markers=self.markers)
            self.blobs += test_blobs
            test = self._samples(owner, test_blobs, ds, True)
        return ds, train, test

    def _samples(self, owner: str, blobs: list[bytes], ds: str, test_only: bool) -> list[str]:
        tx = self[owner].register_local_data(blobs, ds, test_only)
        self.ok(owner, tx)
        return [s["key"] for s in tx.payload["samples"]]

    def objective(self, owner: str, ds: str, test: Sequence[str], *, metric: str = "mse", process: Iterable[str] = ()) -> str:
        perms = {"process": sorted({owner, *process})}
        return self.ok(owner, self[owner].register_objective(f"obj-{owner}", metric, [(s, ds) for s in test], permissions=perms))

    def algorithm(self, owner: str, spec, *, process: Iterable[str] = (), download: Iterable[str] = ()) -> str:
        perms = {"process": sorted({owner, *process, *download}), "download": sorted({owner, *download})}
        name = f"algo-{owner}-{len(self.state.algorithms)}"
        return self.ok(owner, self[owner].register_algorithm(name, spec, permissions=perms))


def random_plan(rng, datasets, algorithm, aggregator, objective, n_steps, *, tag="random", evaluate=0.3):
    """A random valid DAG of trainer and aggregator steps, with some certified evaluations.

    ``rng`` is a ``random.Random``; ``datasets`` is a list of (dataset key, sample keys).
    """
    from fedledger.plans import ComputePlan, TestStep, TrainStep

    steps, refs, seen = [], [], set()
    for i in range(n_steps):
        ref = f"s{i}"
        for _ in range(20):  # identical steps would be one task; redraw
            if len(refs) >= 2 and rng.random() < 0.3:
                inputs = tuple(rng.sample(refs, rng.randint(2, min(3, len(refs)))))
                step = TrainStep(ref, aggregator, objective, inputs=inputs)
            else:
                dataset, samples = rng.choice(datasets)
                inputs = (rng.choice(refs),) if refs and rng.random() < 0.6 else ()
                step = TrainStep(ref, algorithm, objective, dataset, tuple(samples), inputs)
            sig = (step.algorithm, step.dataset, step.inputs)
            if sig not in seen:
                seen.add(sig)
                steps.append(step)
                refs.append(ref)
                break
    for ref in refs:
        if rng.random() < evaluate:
            steps.append(TestStep(f"eval-{ref}", ref, objective))
    return ComputePlan(tag, tuple(steps))


def longest_paths(plan):
    """Independent rank oracle: longest input chain per training step, by memoized DFS."""
    parents = {s.ref: list(s.inputs) for s in plan.train_steps()}
    memo: dict = {}

    def depth(ref):
        if ref not in memo:
            memo[ref] = 0 if not parents[ref] else 1 + max(depth(p) for p in parents[ref])
        return memo[ref]

    return {ref: depth(ref) for ref in parents}
