"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: schema/domain problems exit with 3,
numerical failures with 4.
"""


class ConfigError(ValueError):
    """Invalid configuration or arguments (bad sizes, unknown blocks, ...)."""


class SchemaError(ValueError):
    """Input data does not match the expected layout."""


class DomainError(ValueError):
    """A value lies outside the domain on which a function is defined."""


class NumericalError(ArithmeticError):
    """A numerical procedure produced non-finite or singular results."""


class EstimationError(NumericalError):
    """A statistical estimation step had too little information to proceed."""


class OptimizationError(NumericalError):
    """Posterior mode search diverged."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class SimulationError(NumericalError):
    """Data generation failed (e.g. non-monotone cumulative hazard)."""
