"""Exception types shared across the package."""


class HsiError(Exception):
    """Base class for package errors the CLI reports with a nonzero exit."""


class CubeFormatError(HsiError, ValueError):
    """A cube file or sidecar could not be decoded."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ProtocolError(HsiError):
    """An evaluation protocol precondition was violated."""


class CompatibilityError(HsiError):
    """A stored artifact does not match the checkpoint it is used with."""


class TrainingError(HsiError, FloatingPointError):
    """Training produced a non-finite loss."""


class SynthesisError(HsiError):
    """Synthetic data generation could not satisfy its constraints."""
