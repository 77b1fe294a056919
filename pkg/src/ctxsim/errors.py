"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: validation-type errors exit 1,
file format / I/O errors exit 2, numerical divergence exits 3.
"""


class CtxsimError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(CtxsimError):
    """Input data violates a documented invariant."""


class ParseError(ValidationError):
    """A trials/triplets file failed to parse; carries the line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateVectorError(ValidationError):
    """A vector with norm below the degenerate threshold cannot be normalized."""


class MissingEmbeddingError(ValidationError):
    """An image ID was requested that the embedding store does not contain."""


class FormatError(CtxsimError):
    """A binary file does not carry the expected magic bytes or version."""


class CorruptionError(CtxsimError):
    """A binary file is truncated or internally inconsistent."""


class DivergenceError(CtxsimError):
    """Training produced a non-finite loss or gradient.

    Carries the last finite parameters and the history accumulated so far,
    so callers can checkpoint the state before the blow-up.
    """

    def __init__(self, message: str, params=None, history=None):
        super().__init__(message)
        self.params = params
        self.history = history
