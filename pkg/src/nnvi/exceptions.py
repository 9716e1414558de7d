"""Exception types shared across the package."""


class ParameterError(ValueError):
    """A model or market parameter violates its admissible range."""


class DomainError(ValueError):
    """A point, box or grid lies outside where an object is defined."""


class ExtrapolationError(DomainError):
    """A query would require evaluating a surrogate outside its training box."""


class ContractError(ValueError):
    """Inputs have the wrong shape, size or structure."""


class EvaluationError(ArithmeticError):
    """A coefficient, jet entry or loss term evaluated to a non-finite value."""


class StepCountError(ValueError):
    """A lattice is too coarse for its drift: branch probabilities leave (0, 1)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, last_good_state=None, step=None):
        super().__init__(message)
        self.last_good_state = last_good_state
        self.step = step


class DependencyError(RuntimeError):
    """A step needs an artifact (e.g. a checkpoint) that has not been produced."""
