"""Exception hierarchy shared by every capnet module.

The CLI maps :class:`ValidationError` subclasses to exit code 1 and
:class:`FormatError` / :class:`OSError` to exit code 2.
"""


class CapnetError(Exception):
    pass


class ValidationError(CapnetError, ValueError):
    """Bad input value or argument."""


class DimensionError(ValidationError):
    """Tensor shapes do not fit the operation."""


class DomainError(ValidationError):
    """Input outside the mathematical domain of an op (e.g. log of 0)."""


class VocabularyError(ValidationError):
    """Token id out of range for a vocabulary."""


class ConfigurationError(ValidationError):
    """Bad config key/value, or a parameter store missing required entries."""


class GenerationError(ValidationError):
    """A synthetic dataset spec that cannot be rendered."""


class StateError(CapnetError):
    """Optimizer state out of sync with the parameter store."""


class EvaluationError(CapnetError):
    """A loss evaluated to a non-finite value."""


class FormatError(CapnetError):
    """Malformed file (image header, checkpoint, manifest)."""
