"""Exception and warning types shared across the package."""


class XpdError(Exception):
    """Base class for all library errors."""


class ConfigurationError(XpdError):
    """A config value is out of range, inconsistent, or unusable."""


class ShapeError(XpdError):
    """Array arguments have incompatible or unsupported shapes."""


class DomainError(XpdError):
    """Array values fall outside the documented domain."""


class PreconditionError(XpdError):
    """A documented call precondition does not hold."""


class GenerationError(XpdError):
    """Scene sampling failed to produce an acceptable arrangement."""


class CheckpointMismatchError(XpdError):
    """Checkpoint architecture does not match the requested network."""


class DegenerateInstanceWarning(UserWarning):
    """An instance has no usable boundary/valid pixels; result degrades to zero."""


class EmptyEvaluationWarning(UserWarning):
    """A metric is undefined for the given inputs and is reported as null."""
