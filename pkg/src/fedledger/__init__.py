"""Deterministic multi-node simulation of a ledger-orchestrated federated learning platform."""

from .assets import PermissionRegime, check_download_right, check_process_right, intersect_permissions
from .content_store import BlobStore
from .errors import Reason, Rejection
from .hashing import ContentHash, canonical_json, digest

__all__ = [
    "BlobStore",
    "ContentHash",
    "PermissionRegime",
    "Reason",
    "Rejection",
    "canonical_json",
    "check_download_right",
    "check_process_right",
    "digest",
    "intersect_permissions",
]

__version__ = "0.1.0"
