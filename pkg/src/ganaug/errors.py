"""Exception types shared across the pipeline."""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(PipelineError):
    pass


class ZeroVariance(PipelineError):
    pass


class EmptyForeground(PipelineError):
    pass


class OutOfBounds(PipelineError):
    pass


class NonDyadic(PipelineError):
    pass


class DimensionMismatch(PipelineError):
    pass


class AlreadyAtTarget(PipelineError):
    pass


class UnknownLayer(PipelineError):
    pass


class ScheduleExhaustsFinalLayer(PipelineError):
    pass


class EmptyPool(PipelineError):
    pass


class BadBudget(PipelineError):
    pass


class BadCount(PipelineError):
    pass


class DegenerateClass(PipelineError):
    pass


class DegenerateVariance(PipelineError):
    pass


class MissingResults(PipelineError):
    pass


class ConfigError(PipelineError):
    pass


class StageFailure(PipelineError):
    pass
