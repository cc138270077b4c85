"""Exception hierarchy shared by every txlens stage."""

from __future__ import annotations


class TxLensError(Exception):
    """Base class for all txlens errors."""


class InvalidBundleError(TxLensError):
    def __init__(self, field: str, reason: str) -> None:
        super().__init__(f"invalid bundle: {field}: {reason}")
        self.field = field
        self.reason = reason


class DuplicateBundleError(TxLensError):
    pass


class ParseError(TxLensError):
    def __init__(self, position: str, reason: str) -> None:
        super().__init__(f"parse error at {position}: {reason}")
        self.position = position
        self.reason = reason


class ValidationError(InvalidBundleError):
    """A fixture parsed cleanly but violates a bundle invariant."""


class NetworkError(TxLensError):
    pass


class NotFoundError(TxLensError):
    pass


class TraceUnavailableError(TxLensError):
    pass


class MalformedLogError(TxLensError):
    pass


class MalformedSignatureError(TxLensError):
    pass


class UnverifiedContractError(TxLensError):
    pass


class RateLimitedError(NetworkError):
    pass


class BackendProtocolError(TxLensError):
    pass


class CoverageError(TxLensError):
    pass


class PreconditionError(TxLensError):
    pass


class SchemaError(TxLensError):
    def __init__(self, file: str, field: str, reason: str) -> None:
        super().__init__(f"{file}: {field}: {reason}")
        self.file = file
        self.field = field
        self.reason = reason


class MismatchedFixtureError(TxLensError):
    pass
