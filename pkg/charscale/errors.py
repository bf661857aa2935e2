"""
exception types raised by the charscale package.

every error subclasses CharscaleError and the closest builtin, so callers
can catch either one.
"""


class CharscaleError(Exception):
    pass


class ShapeError(CharscaleError, ValueError):
    pass


class ContractViolation(CharscaleError, ValueError):
    pass


class SingularParameterError(CharscaleError, ValueError):
    pass


class NonFiniteStateError(CharscaleError, FloatingPointError):
    pass


class InsufficientDataError(CharscaleError, ValueError):
    pass


class ReplicaDivergenceError(CharscaleError, RuntimeError):
    pass


class ReportError(CharscaleError, ValueError):
    pass


class CheckpointError(CharscaleError, IOError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ConfigError(CharscaleError, ValueError):
    pass


class TrainingDivergedError(CharscaleError, RuntimeError):
    """
    raised by the divergence detector.

    arguments:
    iteration -- the iteration at which training was aborted
    streak -- number of consecutive divergent iterations seen
    """
    def __init__(self, message, iteration=None, streak=None):
        CharscaleError.__init__(self, message)
        self.iteration = iteration
        self.streak = streak
