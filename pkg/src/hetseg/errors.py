"""Exception hierarchy.

``ValidationError`` subclasses signal bad inputs or configuration (CLI exit
code 1); everything else derived from ``HetsegError`` is a runtime failure
(exit code 2).
"""


class HetsegError(Exception):
    pass


class ValidationError(HetsegError, ValueError):
    pass


class LabelCollision(ValidationError):
    pass


class NoSharedModalities(ValidationError):
    pass


class LabelSpaceError(ValidationError):
    pass


class NotFound(ValidationError, KeyError):
    def __str__(self):
        # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ConfigError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class InvalidComplement(ValidationError):
    pass


class OutOfBounds(ValidationError, IndexError):
    pass


class GeometryError(ValidationError):
    pass


class EmptyClass(ValidationError):
    pass


class InsufficientData(ValidationError):
    pass


class FormatError(HetsegError):
    pass


class UnsupportedDatatype(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class IoError(HetsegError, OSError):
    pass


class NonFiniteLoss(HetsegError, FloatingPointError):
    pass


class DivergedError(HetsegError):
    def __init__(self, iteration, value):
        super().__init__(f"non-finite training loss {value!r} at iteration {iteration}")
        self.iteration = iteration
        self.value = value
