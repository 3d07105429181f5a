"""Exception types shared across the package."""


class FungallocError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(FungallocError):
    pass


class NonPositiveLimit(FungallocError):
    pass


class ZeroEfficiencyRowWithLogUtility(FungallocError):
    """A job has no usable resource but its utility is unbounded below at t=0."""


class DomainViolation(FungallocError):
    pass


class NotStrictlyConcave(FungallocError):
    pass


class TOutOfSegment(FungallocError):
    pass


class UnsupportedFamily(FungallocError):
    pass


class LineSearchFailed(FungallocError):
    pass


class ParseError(FungallocError):
    pass


class ProjectionNotConverged(FungallocError):
    pass
