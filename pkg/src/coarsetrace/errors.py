"""Exception types shared across the package.

Every error that a batch run can hit maps onto a distinct CLI exit code,
so the hierarchy below stays flat and explicit.
"""


class CoarseTraceError(Exception):
    """Base class for all package errors."""


class DimensionMismatchError(CoarseTraceError):
    """Sites or operators living on incompatible lattices."""


class ShapeMismatchError(CoarseTraceError):
    """Kernel block dimensions do not match."""


class WindowTooSmallError(CoarseTraceError):
    """A computation touched the guard collar of its finite window.

    The result would silently depend on the window, so the computation is
    refused instead.  Enlarge the window and re-run.
    """


class UnboundedSupportError(CoarseTraceError):
    """A trace was requested for a chain without a bounded support certificate."""


class ValidationError(CoarseTraceError):
    """An operator failed its idempotency/invertibility validation."""

    def __init__(self, message, max_residual=None, witness=None):
        super().__init__(message)
        self.max_residual = max_residual
        self.witness = witness


class FormulaMismatchError(CoarseTraceError):
    """Two formulas that must agree disagreed beyond tolerance.

    This signals an implementation or certificate bug, never a property of
    the input.
    """


class GapClosedError(CoarseTraceError):
    """The requested spectral gap is not open."""


class TailFitError(CoarseTraceError):
    """Exponential tail fit of a kernel failed (non-positive decay rate)."""


class ConfigError(CoarseTraceError):
    """A CLI configuration document failed schema validation."""


class IndeterminateRoundingError(CoarseTraceError):
    """A normalized pairing value sits at a rounding tie."""
