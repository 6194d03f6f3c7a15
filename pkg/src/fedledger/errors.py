from __future__ import annotations

import enum


class FedLedgerError(Exception):
    """Base class for every error raised by this package."""


class StoreError(FedLedgerError):
    pass


class NotFound(FedLedgerError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class IntegrityError(FedLedgerError):
    """Stored or transmitted bytes no longer match their recorded digest."""


class NoOpBlock(FedLedgerError):
    pass


class Reason(str, enum.Enum):
    """Machine-readable rejection codes; part of the CLI/JSON contract."""

    PERMISSION_DENIED = "PermissionDenied"
    TEST_DATA_SANCTUARY = "TestDataSanctuary"
    UNKNOWN_ASSET = "UnknownAsset"
    PERMISSION_WIDEN = "PermissionWiden"
    ILLEGAL_TRANSITION = "IllegalTransition"
    NOT_WORKER = "NotWorker"
    MISSING_RESULT = "MissingResult"
    KIND_MISMATCH = "KindMismatch"
    ALREADY_EXISTS = "AlreadyExists"
    INVALID_PAYLOAD = "InvalidPayload"

    def __str__(self) -> str:
        return self.value


class Rejection(FedLedgerError):
    """A transaction refused by the chaincode."""

    def __init__(self, reason: Reason, detail: str = "") -> None:
        self.reason = Reason(reason)
        self.detail = detail
        super().__init__(f"{self.reason.value}: {detail}" if detail else self.reason.value)


class AssetDenied(FedLedgerError):
    def __init__(self, reason: str, detail: str = "") -> None:
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason}: {detail}" if detail else reason)


class UnknownAsset(FedLedgerError):
    pass


class Unreachable(FedLedgerError):
    """The other end of an asset request is partitioned or gone."""


# ml kernel errors


class MLError(FedLedgerError):
    pass


class DimensionMismatch(MLError, ValueError):
    pass


class NonFiniteError(MLError, ArithmeticError):
    pass


class EmptyInput(MLError, ValueError):
    pass


class EmptyTestSet(MLError, ValueError):
    pass


class BadK(MLError, ValueError):
    pass


class ParseError(MLError, ValueError):
    def __init__(self, row: int, column: str, detail: str = "") -> None:
        self.row = row
        self.column = column
        super().__init__(f"row {row}, column {column!r}: {detail}")


class SchemaError(MLError, ValueError):
    pass


# compute plan errors


class PlanError(FedLedgerError, ValueError):
    pass


class EmptyPlan(PlanError):
    pass


class BadRounds(PlanError):
    pass


class CyclicPlan(PlanError):
    pass


class UnknownRef(PlanError):
    pass
