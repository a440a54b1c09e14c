"""Exception hierarchy shared across the pipeline stages."""


class GfmError(Exception):
    """Base class for every domain error raised by this package."""


class FormatError(GfmError):
    pass


class CorruptionError(GfmError):
    pass


class ShapeError(GfmError, ValueError):
    pass


class EmptyInputError(GfmError, ValueError):
    pass


class DegenerateInputError(GfmError, ValueError):
    pass


class MissingSourceError(GfmError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class StateError(GfmError):
    pass


class NumericError(GfmError, FloatingPointError):
    pass


class LabelError(GfmError, ValueError):
    pass


class CompatibilityError(GfmError):
    pass


class ConfigError(GfmError, ValueError):
    def __init__(self, message, pointer=""):
        self.pointer = pointer
        super().__init__(f"{pointer or '/'}: {message}")


class StageError(GfmError):
    """A pipeline stage could not run because a prerequisite artifact is missing."""

    def __init__(self, stage, message):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


class ParseError(GfmError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
