"""Asset records and the permission regimes that govern them.

A regime names the nodes allowed to *process* an asset (trigger computation
on it inside its holder's node) and the nodes allowed to *download* it.
Download always implies process, and the owner always holds both rights.
An optional objective whitelist restricts the purposes an asset can serve.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Optional, Union

from .hashing import ContentHash

NodeId = str

ASSET_KINDS = ("objective", "dataset", "algorithm")
ALGORITHM_KINDS = ("trainer", "aggregator", "composite")
METRIC_KINDS = ("mse", "accuracy")


def check_node_id(node: object) -> NodeId:
    if not isinstance(node, str) or not node or node != node.strip():
        raise ValueError(f"invalid node id: {node!r}")
    return node


def _node_set(nodes: Iterable[str]) -> frozenset[str]:
    if isinstance(nodes, str):
        raise TypeError("expected a collection of node ids, got a string")
    return frozenset(check_node_id(n) for n in nodes)


@dataclass(frozen=True)
class PermissionRegime:
    owner: NodeId
    process: frozenset[NodeId] = frozenset()
    download: frozenset[NodeId] = frozenset()
    objective_whitelist: Optional[frozenset[ContentHash]] = None

    def __post_init__(self) -> None:
        check_node_id(self.owner)
        download = _node_set(self.download) | {self.owner}
        process = _node_set(self.process) | download
        object.__setattr__(self, "download", download)
        object.__setattr__(self, "process", process)
        if self.objective_whitelist is not None:
            wl = frozenset(ContentHash(k) for k in self.objective_whitelist)
            object.__setattr__(self, "objective_whitelist", wl)

    @classmethod
    def private(cls, owner: NodeId) -> "PermissionRegime":
        return cls(owner=owner)

    @classmethod
    def public(cls, owner: NodeId, nodes: Iterable[NodeId], *, download: bool = False) -> "PermissionRegime":
        """Open to every node configured at creation time."""
        nodes = frozenset(nodes)
        return cls(owner=owner, process=nodes, download=nodes if download else frozenset())

    def to_dict(self) -> dict[str, Any]:
        return {
            "owner": self.owner,
            "process": sorted(self.process),
            "download": sorted(self.download),
            "objectives": None if self.objective_whitelist is None else sorted(self.objective_whitelist),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PermissionRegime":
        wl = d.get("objectives")
        return cls(
            owner=d["owner"],
            process=frozenset(d.get("process", ())),
            download=frozenset(d.get("download", ())),
            objective_whitelist=None if wl is None else frozenset(wl),
        )

    def narrower_or_equal(self, other: "PermissionRegime") -> bool:
        """True if every right granted here is also granted by ``other``."""
        if not (self.process <= other.process and self.download <= other.download):
            return False
        if other.objective_whitelist is None:
            return True
        return self.objective_whitelist is not None and self.objective_whitelist <= other.objective_whitelist


Permissions = Union[PermissionRegime, Mapping[str, Any], None]


def permissions_payload(perms: Permissions) -> Optional[dict[str, Any]]:
    if perms is None:
        return None
    if isinstance(perms, PermissionRegime):
        d = perms.to_dict()
        d.pop("owner")
        if d["objectives"] is None:
            d.pop("objectives")
        return d
    return {k: (sorted(v) if isinstance(v, (set, frozenset, list, tuple)) else v) for k, v in perms.items()}


def _intersect_whitelists(a: Optional[frozenset], b: Optional[frozenset]) -> Optional[frozenset]:
    if a is None:
        return b
    if b is None:
        return a
    return a & b


def intersect_permissions(regimes: list[PermissionRegime], holder: NodeId) -> PermissionRegime:
    """Regime inherited by an asset derived from ``regimes``, held by ``holder``.

    Whitelists intersect; an absent objective whitelist is universal. The
    holder is always given download rights so the result can be stored.
    """
    if not regimes:
        raise ValueError("intersect_permissions needs at least one regime")
    process = frozenset.intersection(*(r.process for r in regimes))
    download = frozenset.intersection(*(r.download for r in regimes))
    wl = regimes[0].objective_whitelist
    for r in regimes[1:]:
        wl = _intersect_whitelists(wl, r.objective_whitelist)
    return PermissionRegime(owner=holder, process=process, download=download, objective_whitelist=wl)


def check_process_right(regime: PermissionRegime, requester: NodeId, objective: Optional[str] = None) -> bool:
    if requester not in regime.process:
        return False
    if regime.objective_whitelist is None or objective is None:
        return True
    return objective in regime.objective_whitelist


def check_download_right(regime: PermissionRegime, requester: NodeId) -> bool:
    return requester in regime.download


def regime_from_request(
    owner: NodeId, request: Optional[Mapping[str, Any]], default: Optional[PermissionRegime] = None
) -> PermissionRegime:
    """Build a regime from a transaction's ``permissions`` field.

    Missing fields fall back to ``default`` (or to owner-only when there is none).
    """
    request = request or {}
    base = default or PermissionRegime.private(owner)
    process = request.get("process")
    download = request.get("download")
    if "objectives" in request:
        wl = request["objectives"]
        wl = None if wl is None else frozenset(wl)
    else:
        wl = base.objective_whitelist
    return PermissionRegime(
        owner=owner,
        process=base.process if process is None else frozenset(process),
        download=base.download if download is None else frozenset(download),
        objective_whitelist=wl,
    )


@dataclass(frozen=True)
class MetricSpec:
    kind: str

    def __post_init__(self) -> None:
        if self.kind not in METRIC_KINDS:
            raise ValueError(f"unknown metric kind {self.kind!r}")

    @property
    def higher_is_better(self) -> bool:
        return self.kind == "accuracy"

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind}


@dataclass(frozen=True)
class Objective:
    key: ContentHash
    name: str
    owner: NodeId
    metric: MetricSpec
    metrics_hash: ContentHash
    test_samples: tuple[tuple[ContentHash, ContentHash], ...]
    permissions: PermissionRegime
    description_hash: Optional[ContentHash] = None

    @property
    def test_dataset_keys(self) -> list[ContentHash]:
        return sorted({ds for _, ds in self.test_samples})

    def to_dict(self) -> dict[str, Any]:
        return {
            "key": self.key,
            "name": self.name,
            "owner": self.owner,
            "metric": self.metric.to_dict(),
            "metrics_hash": self.metrics_hash,
            "test_samples": [list(p) for p in self.test_samples],
            "permissions": self.permissions.to_dict(),
            "description_hash": self.description_hash,
        }


@dataclass(frozen=True)
class Dataset:
    key: ContentHash
    name: str
    owner: NodeId
    opener_hash: ContentHash
    data_type: str
    permissions: PermissionRegime
    objective_key: Optional[ContentHash] = None
    description_hash: Optional[ContentHash] = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "key": self.key,
            "name": self.name,
            "owner": self.owner,
            "opener_hash": self.opener_hash,
            "data_type": self.data_type,
            "permissions": self.permissions.to_dict(),
            "objective_key": self.objective_key,
            "description_hash": self.description_hash,
        }


@dataclass(frozen=True)
class DataSample:
    """Ledger view of a private sample: its hash and flags only, never its bytes."""

    key: ContentHash
    owner: NodeId
    dataset_keys: tuple[ContentHash, ...]
    test_only: bool

    def to_dict(self) -> dict[str, Any]:
        return {
            "key": self.key,
            "owner": self.owner,
            "dataset_keys": list(self.dataset_keys),
            "test_only": self.test_only,
        }


@dataclass(frozen=True)
class Algorithm:
    key: ContentHash
    name: str
    owner: NodeId
    kind: str
    file_hash: ContentHash
    permissions: PermissionRegime
    objective_key: Optional[ContentHash] = None
    description_hash: Optional[ContentHash] = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "key": self.key,
            "name": self.name,
            "owner": self.owner,
            "kind": self.kind,
            "file_hash": self.file_hash,
            "permissions": self.permissions.to_dict(),
            "objective_key": self.objective_key,
            "description_hash": self.description_hash,
        }


@dataclass(frozen=True)
class ModelRecord:
    """A model blob produced by a traintuple. ``role`` is "model", "trunk" or "head"."""

    key: ContentHash
    producing_tuple: ContentHash
    holder: NodeId
    permissions: PermissionRegime
    role: str = "model"

    def to_dict(self) -> dict[str, Any]:
        return {
            "key": self.key,
            "producing_tuple": self.producing_tuple,
            "holder": self.holder,
            "permissions": self.permissions.to_dict(),
            "role": self.role,
        }


__all__ = [
    "Algorithm",
    "DataSample",
    "Dataset",
    "MetricSpec",
    "ModelRecord",
    "NodeId",
    "Objective",
    "PermissionRegime",
    "Permissions",
    "check_download_right",
    "check_process_right",
    "intersect_permissions",
    "permissions_payload",
    "regime_from_request",
]
