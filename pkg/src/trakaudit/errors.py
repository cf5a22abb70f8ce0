"""Exception types raised across the package."""


class TrakAuditError(Exception):
    """Base class for package errors."""


class DimensionError(TrakAuditError, ValueError):
    pass


class EmptyDatasetError(TrakAuditError, ValueError):
    pass


class ResponseError(TrakAuditError, ValueError):
    """A response lies outside the codomain of the declared loss."""


class SolverError(TrakAuditError, RuntimeError):
    pass


class UnderdeterminedError(SolverError):
    """The linearized problem has more parameters than usable rows."""


class RefitError(TrakAuditError, RuntimeError):
    """An exact leave-one-out refit did not converge."""


class BreakdownError(TrakAuditError, ArithmeticError):
    """An ALO/TRAK denominator fell below the floor or the Gram system is singular."""


class FormatError(TrakAuditError, ValueError):
    """Malformed input file."""
