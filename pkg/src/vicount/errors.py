"""Exception hierarchy; the CLI maps these onto exit codes."""


class VicountError(Exception):
    """Base class for everything raised by this package."""


class ConfigError(VicountError):
    """Invalid configuration or usage (CLI exit code 2)."""


class DataError(VicountError):
    """Bad input data (CLI exit code 3)."""


class AnnotationParseError(DataError):
    """Malformed annotation file; carries the offending line number."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class ValidationError(DataError):
    """Structurally valid input that violates an invariant."""


class SupervisionError(DataError):
    """Operation requires a supervision mode the clip does not have."""


class SamplingError(DataError):
    """Clip cannot produce a training pair under the given config."""


class ModelError(VicountError):
    """Model/runtime failure (CLI exit code 4)."""


class ShapeError(ModelError):
    """Input tensor shape violates a model contract."""


class TrainingDivergedError(ModelError):
    """Loss became non-finite; carries the step at which it happened."""

    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step
