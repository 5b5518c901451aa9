"""Exception hierarchy shared by all fmukf modules."""


class FMUKFError(Exception):
    """Base class for every error raised by this package."""


class NonFiniteState(FMUKFError, ValueError):
    pass


class InvalidParams(FMUKFError, ValueError):
    pass


class Diverged(FMUKFError, ArithmeticError):
    pass


class DegenerateNormalizer(FMUKFError, ArithmeticError):
    pass


class PoolExhausted(FMUKFError, RuntimeError):
    pass


class NotPositiveDefinite(FMUKFError, ArithmeticError):
    pass


class SingularInnovation(FMUKFError, ArithmeticError):
    pass


class ModelFailure(FMUKFError, RuntimeError):
    pass


class StatsNotFitted(FMUKFError, RuntimeError):
    pass


class SequenceTooLong(FMUKFError, ValueError):
    pass


class TrajectoryTooShort(FMUKFError, ValueError):
    pass


class DegenerateFeature(FMUKFError, ArithmeticError):
    pass


class NonFiniteLoss(FMUKFError, ArithmeticError):
    def __init__(self, message, batch_ids=()):
        super().__init__(message)
        self.batch_ids = list(batch_ids)


class UnknownSensorConfig(FMUKFError, KeyError):
    pass


class LengthMismatch(FMUKFError, ValueError):
    pass


class ConfigError(FMUKFError, ValueError):
    pass


class SplitViolation(FMUKFError, ValueError):
    """Train and test instance sets overlap."""
