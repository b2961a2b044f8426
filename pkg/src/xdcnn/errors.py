"""Exception types shared across the package.

The CLI maps each class onto a stable exit code (see ``xdcnn.cli``).
"""


class XdError(Exception):
    """Base class for all package errors."""


class ValidationError(XdError, ValueError):
    """Bad arguments, shapes, specs or configs (exit code 2)."""


class FormatError(XdError):
    """A file on disk is malformed, truncated or inconsistent (exit code 3)."""


class NonFiniteError(XdError, ArithmeticError):
    """NaN or Inf appeared in a tensor (exit code 4)."""


class StaleTapeError(XdError, RuntimeError):
    """A tape was replayed after its backward pass already ran."""


class VerificationError(XdError):
    """A verification oracle (gradcheck) failed (exit code 5)."""
