"""Exception hierarchy.

Anything deriving from :class:`ValidationError` is a problem with user input
(manifests, configs, class maps) and maps to CLI exit code 1. Everything else
is a runtime failure.
"""


class FMPNError(Exception):
    """Base class for all package errors."""


class ValidationError(FMPNError, ValueError):
    """Input failed validation."""


class ManifestParseError(ValidationError):
    def __init__(self, row, message):
        self.row = row
        super().__init__(f"row {row}: {message}")


class ConfigError(ValidationError):
    pass


class PlanningError(ValidationError):
    pass


class CoverageError(ValidationError):
    def __init__(self, class_name, message=None):
        self.class_name = class_name
        super().__init__(message or f"no paired samples for class {class_name!r}")


class MappingError(ValidationError):
    def __init__(self, class_name, message=None):
        self.class_name = class_name
        super().__init__(message or f"class {class_name!r} has no entry in the class map")


class ShapeError(ValidationError):
    pass


class SingularConfigurationError(FMPNError, ArithmeticError):
    """Landmark configuration admits no unique similarity transform."""


class LoadError(FMPNError):
    """A weight file or checkpoint is incompatible with the requested model."""
