"""Exception types shared across the package."""


class SafeguardError(Exception):
    """Base class for all package-specific errors."""


class MassMatrixSingular(SafeguardError):
    """The 2x2 mass matrix is numerically singular (non-physical parameters)."""


class NonFinite(SafeguardError):
    """A computation produced NaN or infinity."""


class NotStabilizable(SafeguardError):
    """Riccati iteration failed to produce a stabilizing solution."""


class NotHurwitz(SafeguardError):
    """A matrix expected to be Hurwitz has an eigenvalue with nonnegative real part."""


class EmptySet(SafeguardError):
    """Backup-set certification shrank the level below the useful minimum."""


class DimensionMismatch(SafeguardError):
    """An operation received inputs of an unsupported dimension."""


class BadCombination(SafeguardError):
    """Mutually inconsistent options were supplied to a program assembler."""


class MaxIterations(SafeguardError):
    """An iterative solver hit its iteration cap before converging."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class EmptyLog(SafeguardError):
    """A safety report was requested for an empty simulation log."""
