"""Exception hierarchy shared across the package.

Validation problems (bad shapes, bad config, missing files) derive from
``ValidationError`` so the CLI can map them to exit status 1; everything else
that goes wrong at runtime maps to exit status 2.
"""


class LoadVitError(Exception):
    """Base class for all package errors."""


class ValidationError(LoadVitError, ValueError):
    """Input or configuration rejected before any work was done."""


class ShapeError(ValidationError):
    pass


class ContractError(ValidationError):
    """A precondition of an operation was violated."""


class ConfigError(ValidationError):
    pass


class BoundsError(ValidationError):
    pass


class WindowError(ValidationError):
    pass


class CheckpointError(ValidationError):
    pass


class EvaluationError(LoadVitError, ArithmeticError):
    """A function produced a non-finite value where a finite one was required."""


class OptimizerError(LoadVitError, ArithmeticError):
    pass


class TrainingDiverged(LoadVitError, ArithmeticError):
    def __init__(self, message: str, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
