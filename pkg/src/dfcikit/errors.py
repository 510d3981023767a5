"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class DfciKitError(Exception):
    """Base class for every error raised deliberately by dfcikit."""


class ValidationError(DfciKitError, ValueError):
    """Inputs are malformed, misaligned or violate a precondition."""


class FormatError(ValidationError):
    """A byte stream or file does not follow its declared format."""


class ComputationError(DfciKitError, RuntimeError):
    """A numerical routine produced an unusable result."""
