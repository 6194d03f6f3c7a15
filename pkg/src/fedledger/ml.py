"""Small deterministic learners executed by node workers.

Models are flat float64 vectors with the bias appended last. Composite
models split into a trunk (a linear map to ``trunk_width`` hidden units)
and a head (a linear or logistic unit on top of the trunk output).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from .assets import MetricSpec
from .errors import (
    BadK,
    DimensionMismatch,
    EmptyInput,
    EmptyTestSet,
    NonFiniteError,
    ParseError,
    SchemaError,
)
from .hashing import canonical_json

FAMILIES = ("linear_regression", "logistic_regression")
SEED_SCALE = 0.1


@dataclass(frozen=True)
class ModelWeights:
    values: tuple[float, ...]
    layout: Optional[tuple[int, int]] = None  # (trunk_len, head_len)

    def __post_init__(self) -> None:
        vals = tuple(float(v) for v in self.values)
        if not all(math.isfinite(v) for v in vals):
            raise NonFiniteError("model weights must be finite")
        object.__setattr__(self, "values", vals)
        if self.layout is not None:
            trunk, head = self.layout
            if trunk + head != len(vals):
                raise DimensionMismatch(f"layout {self.layout} does not cover {len(vals)} weights")

    @classmethod
    def from_array(cls, arr, layout=None) -> "ModelWeights":
        return cls(tuple(np.asarray(arr, dtype=np.float64).tolist()), layout)

    def array(self) -> np.ndarray:
        return np.array(self.values, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.values)

    def split(self) -> tuple["ModelWeights", "ModelWeights"]:
        if self.layout is None:
            raise DimensionMismatch("model has no trunk/head layout")
        t = self.layout[0]
        return ModelWeights(self.values[:t]), ModelWeights(self.values[t:])

    def encode(self) -> bytes:
        return canonical_json(list(self.values))

    @classmethod
    def decode(cls, data: bytes) -> "ModelWeights":
        values = json.loads(data.decode("utf-8"))
        if not isinstance(values, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
            raise ValueError("model blob must be a JSON array of numbers")
        return cls(tuple(values))


# ---------------------------------------------------------------- specs


def _init_spec(raw: Any) -> Optional[int]:
    """Parse an ``init`` field: "zeros" -> None, {"seeded": n} -> n."""
    if raw in (None, "zeros"):
        return None
    if isinstance(raw, Mapping) and isinstance(raw.get("seeded"), int):
        return raw["seeded"]
    raise ValueError(f"bad init {raw!r}")


@dataclass(frozen=True)
class TrainerSpec:
    family: str
    learning_rate: float
    local_steps: int
    seed: Optional[int] = None  # None means zeros init

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.local_steps < 1:
            raise ValueError("local_steps must be at least 1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "trainer",
            "family": self.family,
            "learning_rate": self.learning_rate,
            "local_steps": self.local_steps,
            "init": "zeros" if self.seed is None else {"seeded": self.seed},
        }


@dataclass(frozen=True)
class AggregatorSpec:
    weighting: str = "uniform"

    def __post_init__(self) -> None:
        if self.weighting not in ("uniform", "by_sample_count"):
            raise ValueError(f"unknown weighting {self.weighting!r}")

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "aggregator", "weighting": self.weighting}


@dataclass(frozen=True)
class CompositeSpec:
    trunk_width: int
    head_family: str
    learning_rate: float
    local_steps: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.trunk_width < 1:
            raise ValueError("trunk_width must be at least 1")
        if self.head_family not in FAMILIES:
            raise ValueError(f"unknown family {self.head_family!r}")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.local_steps < 1:
            raise ValueError("local_steps must be at least 1")

    def trunk_len(self, n_features: int) -> int:
        return self.trunk_width * (n_features + 1)

    def head_len(self) -> int:
        return self.trunk_width + 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "composite",
            "trunk_width": self.trunk_width,
            "head_family": self.head_family,
            "learning_rate": self.learning_rate,
            "local_steps": self.local_steps,
            "init": {"seeded": self.seed},
        }


def spec_from_dict(d: Mapping[str, Any]):
    kind = d.get("kind")
    if kind == "trainer":
        return TrainerSpec(d["family"], float(d["learning_rate"]), int(d["local_steps"]), _init_spec(d.get("init")))
    if kind == "aggregator":
        return AggregatorSpec(d.get("weighting", "uniform"))
    if kind == "composite":
        seed = _init_spec(d.get("init", {"seeded": 0}))
        return CompositeSpec(
            int(d["trunk_width"]), d["head_family"], float(d["learning_rate"]), int(d["local_steps"]), seed or 0
        )
    raise ValueError(f"unknown algorithm kind {kind!r}")


def encode_spec(spec) -> bytes:
    return canonical_json(spec.to_dict())


def decode_spec(data: bytes):
    return spec_from_dict(json.loads(data.decode("utf-8")))


@dataclass(frozen=True)
class OpenerDescriptor:
    feature_columns: tuple[str, ...]
    label_column: str
    delimiter: str = ","
    comment: str = "#"
    format: str = "csv"

    def __post_init__(self) -> None:
        object.__setattr__(self, "feature_columns", tuple(self.feature_columns))
        if self.format != "csv":
            raise SchemaError(f"unsupported format {self.format!r}")
        if not self.feature_columns:
            raise SchemaError("at least one feature column is required")
        if self.label_column in self.feature_columns:
            raise SchemaError("label column cannot also be a feature")

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": self.format,
            "feature_columns": list(self.feature_columns),
            "label_column": self.label_column,
            "delimiter": self.delimiter,
            "comment": self.comment,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "OpenerDescriptor":
        return cls(
            feature_columns=tuple(d["feature_columns"]),
            label_column=d["label_column"],
            delimiter=d.get("delimiter", ","),
            comment=d.get("comment", "#"),
            format=d.get("format", "csv"),
        )

    def encode(self) -> bytes:
        return canonical_json(self.to_dict())


# ---------------------------------------------------------------- data opening


def open_samples(opener: OpenerDescriptor, blobs: Sequence[bytes]) -> tuple[np.ndarray, np.ndarray]:
    """Parse CSV sample blobs into a feature matrix and label vector.

    Each blob has a header row. Lines starting with the comment prefix are
    skipped. Rows are reported 1-based within their blob, header included.
    """
    rows: list[list[float]] = []
    labels: list[float] = []
    for blob in blobs:
        text = blob.decode("utf-8")
        lines = [
            (i, line) for i, line in enumerate(text.splitlines(), start=1)
            if line.strip() and not (opener.comment and line.startswith(opener.comment))
        ]
        if not lines:
            raise SchemaError("sample has no header row")
        reader = csv.reader(io.StringIO("\n".join(line for _, line in lines)), delimiter=opener.delimiter)
        parsed = list(reader)
        header = [h.strip() for h in parsed[0]]
        missing = [c for c in (*opener.feature_columns, opener.label_column) if c not in header]
        if missing:
            raise SchemaError(f"missing columns: {', '.join(missing)}")
        index = {name: header.index(name) for name in (*opener.feature_columns, opener.label_column)}
        for (lineno, _), record in zip(lines[1:], parsed[1:]):
            values = {}
            for name, col in index.items():
                try:
                    values[name] = float(record[col])
                except (IndexError, ValueError):
                    cell = record[col] if col < len(record) else ""
                    raise ParseError(lineno, name, f"not a number: {cell!r}") from None
                if not math.isfinite(values[name]):
                    raise ParseError(lineno, name, "not finite")
            rows.append([values[c] for c in opener.feature_columns])
            labels.append(values[opener.label_column])
    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(opener.feature_columns))
    return X, np.array(labels, dtype=np.float64)


def samples_to_csv(opener: OpenerDescriptor, X, y, header_comment: Optional[str] = None) -> bytes:
    """Inverse of :func:`open_samples` for one blob; used by fixtures and scenarios."""
    out = io.StringIO()
    if header_comment:
        out.write(f"{opener.comment} {header_comment}\n")
    writer = csv.writer(out, delimiter=opener.delimiter, lineterminator="\n")
    writer.writerow([*opener.feature_columns, opener.label_column])
    for row, label in zip(np.asarray(X).tolist(), np.asarray(y).tolist()):
        writer.writerow([repr(float(v)) for v in row] + [repr(float(label))])
    return out.getvalue().encode("utf-8")


# ---------------------------------------------------------------- losses and gradients


def _with_bias(X: np.ndarray) -> np.ndarray:
    return np.hstack([X, np.ones((X.shape[0], 1))])


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def _check_xy(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"X {X.shape} and y {y.shape} are inconsistent")
    if X.shape[0] == 0:
        raise EmptyInput("no training rows")
    return X, y


def _loss_from_output(family: str, out: np.ndarray, y: np.ndarray) -> float:
    if family == "linear_regression":
        return float(np.mean((out - y) ** 2))
    # mean log-loss written with logaddexp for stability
    return float(np.mean(np.logaddexp(0.0, out) - y * out))


def _dloss_dout(family: str, out: np.ndarray, y: np.ndarray) -> np.ndarray:
    n = y.shape[0]
    if family == "linear_regression":
        return 2.0 * (out - y) / n
    return (sigmoid(out) - y) / n


def loss(family: str, w, X, y) -> float:
    X, y = _check_xy(X, y)
    return _loss_from_output(family, _with_bias(X) @ np.asarray(w, dtype=np.float64), y)


def gradient(family: str, w, X, y) -> np.ndarray:
    X, y = _check_xy(X, y)
    Xb = _with_bias(X)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (Xb.shape[1],):
        raise DimensionMismatch(f"model has {w.shape[0]} weights, data needs {Xb.shape[1]}")
    return Xb.T @ _dloss_dout(family, Xb @ w, y)


def _composite_parts(spec: CompositeSpec, params: np.ndarray, n_features: int):
    t = spec.trunk_len(n_features)
    if params.shape != (t + spec.head_len(),):
        raise DimensionMismatch(f"composite needs {t + spec.head_len()} weights, got {params.shape[0]}")
    W = params[:t].reshape(spec.trunk_width, n_features + 1)
    return W, params[t:]


def composite_output(spec: CompositeSpec, params, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    W, head = _composite_parts(spec, np.asarray(params, dtype=np.float64), X.shape[1])
    Z = _with_bias(X) @ W.T
    return _with_bias(Z) @ head


def composite_loss(spec: CompositeSpec, params, X, y) -> float:
    X, y = _check_xy(X, y)
    return _loss_from_output(spec.head_family, composite_output(spec, params, X), y)


def composite_gradient(spec: CompositeSpec, params, X, y) -> np.ndarray:
    """Gradient of the loss of head(trunk(x)) w.r.t. [trunk weights, head weights]."""
    X, y = _check_xy(X, y)
    params = np.asarray(params, dtype=np.float64)
    W, head = _composite_parts(spec, params, X.shape[1])
    Xb = _with_bias(X)
    Zb = _with_bias(Xb @ W.T)
    g = _dloss_dout(spec.head_family, Zb @ head, y)
    grad_head = Zb.T @ g
    grad_W = (g[:, None] * head[None, : spec.trunk_width]).T @ Xb
    return np.concatenate([grad_W.ravel(), grad_head])


# ---------------------------------------------------------------- executors


def init_weights(n: int, seed: Optional[int]) -> np.ndarray:
    if seed is None:
        return np.zeros(n)
    return np.random.default_rng(seed).standard_normal(n) * SEED_SCALE


def _descend(grad_fn, w: np.ndarray, lr: float, steps: int) -> np.ndarray:
    for _ in range(steps):
        with np.errstate(over="ignore", invalid="ignore"):
            w = w - lr * grad_fn(w)
        if not np.all(np.isfinite(w)):
            raise NonFiniteError("gradient descent diverged")
    return w


def train(spec: TrainerSpec, init_model: Optional[ModelWeights], X, y) -> ModelWeights:
    """Full-batch gradient descent for ``spec.local_steps`` iterations."""
    X, y = _check_xy(X, y)
    n = X.shape[1] + 1
    if init_model is None:
        w = init_weights(n, spec.seed)
    else:
        w = init_model.array()
        if w.shape != (n,):
            raise DimensionMismatch(f"initial model has {w.shape[0]} weights, data needs {n}")
    w = _descend(lambda v: gradient(spec.family, v, X, y), w, spec.learning_rate, spec.local_steps)
    return ModelWeights.from_array(w)


def init_composite(spec: CompositeSpec, n_features: int) -> tuple[ModelWeights, ModelWeights]:
    t = spec.trunk_len(n_features)
    params = init_weights(t + spec.head_len(), spec.seed)
    return ModelWeights.from_array(params[:t]), ModelWeights.from_array(params[t:])


def train_composite(
    spec: CompositeSpec, trunk_in: Optional[ModelWeights], head_in: Optional[ModelWeights], X, y
) -> tuple[ModelWeights, ModelWeights]:
    """Joint descent through head and trunk; returns the two parts separately."""
    X, y = _check_xy(X, y)
    d = X.shape[1]
    trunk0, head0 = init_composite(spec, d)
    trunk = trunk_in if trunk_in is not None else trunk0
    head = head_in if head_in is not None else head0
    if len(trunk) != spec.trunk_len(d) or len(head) != spec.head_len():
        raise DimensionMismatch(
            f"trunk/head sizes {len(trunk)}/{len(head)}, expected {spec.trunk_len(d)}/{spec.head_len()}"
        )
    params = np.concatenate([trunk.array(), head.array()])
    params = _descend(lambda v: composite_gradient(spec, v, X, y), params, spec.learning_rate, spec.local_steps)
    t = spec.trunk_len(d)
    return ModelWeights.from_array(params[:t]), ModelWeights.from_array(params[t:])


def aggregate(spec: AggregatorSpec, models: Sequence[ModelWeights], sample_counts: Optional[Sequence[float]] = None) -> ModelWeights:
    if not models:
        raise EmptyInput("nothing to aggregate")
    sizes = {len(m) for m in models}
    if len(sizes) != 1:
        raise DimensionMismatch(f"models have different sizes: {sorted(sizes)}")
    if (spec.weighting == "by_sample_count") != (sample_counts is not None):
        raise ValueError("sample_counts are required for, and only for, by_sample_count weighting")
    stack = np.vstack([m.array() for m in models])
    if sample_counts is None:
        mean = stack.mean(axis=0)
    else:
        counts = np.asarray(sample_counts, dtype=np.float64)
        if counts.shape != (len(models),) or np.any(counts < 0) or counts.sum() <= 0:
            raise DimensionMismatch("need one non-negative sample count per model")
        mean = counts @ stack / counts.sum()
    return ModelWeights.from_array(mean, models[0].layout)


def predict(family: str, model: ModelWeights, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    w = model.array()
    if w.shape[0] != X.shape[1] + 1:
        raise DimensionMismatch(f"model has {w.shape[0]} weights, input has {X.shape[1]} features")
    out = _with_bias(X) @ w
    return sigmoid(out) if family == "logistic_regression" else out


def predict_composite(spec: CompositeSpec, trunk: ModelWeights, head: ModelWeights, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    out = composite_output(spec, np.concatenate([trunk.array(), head.array()]), X)
    return sigmoid(out) if spec.head_family == "logistic_regression" else out


def score(metric: MetricSpec, predictions, y) -> float:
    """mse of raw predictions, or accuracy thresholding at 0.5 (ties go to class 0)."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise DimensionMismatch(f"{p.shape[0]} predictions for {y.shape[0]} labels")
    if y.shape[0] == 0:
        raise EmptyTestSet("no evaluation rows")
    if metric.kind == "mse":
        return float(np.mean((p - y) ** 2))
    return float(np.mean((p > 0.5).astype(np.float64) == y))


def evaluate(metric: MetricSpec, family: str, model: ModelWeights, X, y) -> float:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise EmptyTestSet("no evaluation rows")
    return score(metric, predict(family, model, X), y)


def evaluate_composite(metric: MetricSpec, spec: CompositeSpec, trunk: ModelWeights, head: ModelWeights, X, y) -> float:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise EmptyTestSet("no evaluation rows")
    return score(metric, predict_composite(spec, trunk, head, X), y)


def kfold_split(sample_keys: Sequence[str], k: int) -> list[tuple[list[str], list[str]]]:
    """Contiguous folds over the lexicographically sorted keys; sizes differ by at most one."""
    keys = sorted(sample_keys)
    if len(set(keys)) != len(keys):
        raise BadK("sample keys must be distinct")
    if not 2 <= k <= len(keys):
        raise BadK(f"k={k} is outside [2, {len(keys)}]")
    base, extra = divmod(len(keys), k)
    folds = []
    start = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        test = keys[start : start + size]
        train = keys[:start] + keys[start + size :]
        folds.append((train, test))
        start += size
    return folds
