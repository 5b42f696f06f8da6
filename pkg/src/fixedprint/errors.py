"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when a value violates a type invariant (bad length, NaN, ...)."""


class ConflictError(KeyError):
    """Raised when enrolling a key that already exists in a gallery."""


class ConfigurationError(ValueError):
    """Raised when an operation is asked to run with incompatible inputs."""


class FormatError(ValueError):
    """Malformed binary or text file.

    ``offset`` is the byte (or line) position at which parsing failed.
    """

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class VersionError(FormatError):
    """File carries a format version this build cannot read."""
