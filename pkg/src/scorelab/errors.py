"""Exception hierarchy shared across the package."""


class ScoreLabError(Exception):
    """Base class for all package errors."""


class ContractError(ScoreLabError):
    """A caller broke a documented precondition."""


class DimensionError(ScoreLabError, ValueError):
    """Operand shapes do not conform."""


class ParameterError(ScoreLabError, ValueError):
    """A numeric parameter is outside its valid range."""


class CapabilityError(ScoreLabError):
    """The requested computation is not supported for this input."""


class NonFiniteError(ScoreLabError, FloatingPointError):
    """NaN or Inf appeared while checked mode was on."""


class DivergenceError(ScoreLabError):
    """A sampler left the finite region.

    ``step`` is the index of the iteration at which it happened.
    """

    def __init__(self, message, step):
        super().__init__(f"{message} (step {step})")
        self.step = step


class CheckpointError(ScoreLabError):
    """Checkpoint bytes are malformed or incompatible with the config."""
