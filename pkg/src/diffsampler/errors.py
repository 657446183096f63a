"""Exception hierarchy. Each module raises the subclass naming its failure."""


class DiffSamplerError(Exception):
    """Base class for all errors raised by the package."""


class InputError(DiffSamplerError, ValueError):
    """Malformed arguments: wrong dimension, out-of-range time, batch too small."""


class OracleError(DiffSamplerError):
    """A reference quadrature failed to converge."""


class SimulationError(DiffSamplerError):
    """Non-finite state during SDE simulation."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class PolicyError(DiffSamplerError):
    """The control produced a non-finite value."""


class DomainError(DiffSamplerError, ValueError):
    """A closed-form expression was evaluated outside its domain."""


class GradientError(DiffSamplerError):
    """Loss or gradient is not finite."""


class LossError(DiffSamplerError):
    """A per-trajectory loss term is not finite."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class TrainingError(DiffSamplerError):
    """A training step had to be aborted."""


class EvalError(DiffSamplerError):
    """Evaluation could not produce an estimate."""


class ConfigError(DiffSamplerError, ValueError):
    """Invalid configuration key or value."""
