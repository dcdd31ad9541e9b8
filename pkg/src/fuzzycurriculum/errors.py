"""Exception hierarchy.

Every error raised on purpose by the package derives from
:class:`FuzzyCurriculumError`; the CLI maps the subclasses onto exit codes.
"""


class FuzzyCurriculumError(Exception):
    """Base class for all package errors."""


class InvalidInput(FuzzyCurriculumError):
    """Caller supplied something that can never be valid (CLI exit code 2)."""


class ParseError(InvalidInput):
    pass


class CorruptPayload(InvalidInput):
    pass


class InvariantViolation(InvalidInput):
    pass


class DegenerateVolume(InvalidInput):
    pass


class InvalidParameter(InvalidInput):
    pass


class NonFiniteInput(InvalidInput):
    pass


class ShapeMismatch(InvalidInput):
    pass


class InvalidTarget(InvalidInput):
    pass


class InvalidStep(InvalidInput):
    pass


class InvalidSpec(InvalidInput):
    pass


class InsufficientData(InvalidInput):
    pass


class IoError(FuzzyCurriculumError, OSError):
    """Reading or writing a file failed (CLI exit code 3)."""


class DivergenceError(FuzzyCurriculumError):
    """Training produced a non-finite loss.

    ``state`` holds the last finite training state so callers can inspect
    or resume from it.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state
