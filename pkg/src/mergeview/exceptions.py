"""Exception types shared across the package."""


class ContractViolationError(ValueError):
    """An operation was called with arguments violating its preconditions
    (dimension mismatch, layout mismatch, weight-sum requirement, ...)."""


class InvalidPosteriorError(ValueError):
    """A posterior object failed validation (non-SPD precision, bad mixture
    weights, non-finite entries)."""


class NoInteriorModeError(ValueError):
    """A Beta posterior has no interior mode (requires a > 1 and b > 1)."""


class DegenerateWeightsError(ValueError):
    """The weight vector makes the merge underdetermined (e.g. all task
    weights zero with no regularizer)."""


class DivergenceError(RuntimeError):
    """Training encountered a non-finite loss.  Carries the iteration index."""

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


class PrecisionRepairError(RuntimeError):
    """A full-covariance update produced a precision that is not positive
    definite and cannot be accepted."""


class GridMismatchError(ValueError):
    """Two surfaces were compared over different simplex grids."""


class StoreError(RuntimeError):
    """Base class for artifact-store failures."""


class MissingArtifactError(StoreError):
    """Requested artifact key is not present in the store."""


class ChecksumError(StoreError):
    """On-disk payload does not match its recorded checksum."""


class VersionMismatchError(StoreError):
    """On-disk artifact was written by an incompatible format version."""
