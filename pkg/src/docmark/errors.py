"""Exception types shared across the package."""


class DocmarkError(Exception):
    """Base class for all docmark errors."""


class InvalidInputError(DocmarkError, ValueError):
    """An image, bitstring, or probability sequence violates a precondition."""


class InvalidParameterError(DocmarkError, ValueError):
    """A distortion or embedding parameter is out of its legal range."""


class InvalidConfigError(DocmarkError, ValueError):
    """A configuration (training, checkpoint, attack grid) is inconsistent."""


class TrainingDiagnosticError(DocmarkError, RuntimeError):
    """Training aborted; carries the offending loss component in the message."""


class GenerationError(DocmarkError, RuntimeError):
    """Synthetic document rendering could not satisfy its constraints."""
