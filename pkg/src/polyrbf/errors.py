"""Exception types raised across polyrbf."""


class PolyRBFError(Exception):
    """Base class for all library errors."""


class InvalidArgumentError(PolyRBFError, ValueError):
    pass


class RankDeficiencyError(PolyRBFError, ValueError):
    """Raised when a normal-equation system cannot be factored.

    ``deficiency`` holds the number of numerically null directions.
    """

    def __init__(self, message, deficiency=None):
        super().__init__(message)
        self.deficiency = deficiency


class ProtocolMismatchError(PolyRBFError, ValueError):
    pass


class ExtrapolationError(PolyRBFError, ValueError):
    pass


class UnidentifiableTensorError(PolyRBFError, ValueError):
    pass


class NiftiError(PolyRBFError, OSError):
    pass


class UnsupportedDtypeError(NiftiError):
    pass


class BadMagicError(NiftiError):
    pass


class TruncatedDataError(NiftiError):
    pass


class StageError(PolyRBFError):
    """Wraps a failure inside one harmonization stage."""

    def __init__(self, stage, dataset, cause):
        super().__init__(f"[{stage}] dataset {dataset!r}: {cause}")
        self.stage = stage
        self.dataset = dataset
        self.cause = cause


class ArtifactError(PolyRBFError, OSError):
    """Malformed or unsupported fit artifact."""
