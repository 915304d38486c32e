"""Exception types raised across the package."""


class UgmaeError(Exception):
    """Base class for all package errors."""


class InvalidEdge(UgmaeError):
    pass


class ShapeMismatch(UgmaeError):
    pass


class DuplicateEdge(UgmaeError):
    pass


class InvalidRate(UgmaeError):
    pass


class NonFiniteInput(UgmaeError):
    pass


class NumericalUnderflow(UgmaeError):
    pass


class EmptyMaskSet(UgmaeError):
    pass


class CannotSampleNegative(UgmaeError):
    pass


class NonFiniteLoss(UgmaeError):
    """A loss term became NaN or infinite; ``diagnostics`` holds the offending values."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DegenerateSplit(UgmaeError):
    pass


class InsufficientData(UgmaeError):
    pass


class FormatError(UgmaeError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


class InvalidNodeId(UgmaeError):
    pass


class IncompatibleCheckpoint(UgmaeError):
    pass


class MissingLabels(UgmaeError):
    pass


class ConfigError(UgmaeError):
    pass
