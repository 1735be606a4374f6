"""Exception types shared across the package."""


class FeatvisError(Exception):
    """Base class for all featvis errors."""


class ValidationError(FeatvisError):
    """A value violates a documented contract (shape, range, finiteness)."""


class ConfigError(FeatvisError):
    """A configuration or precondition is infeasible (counts, ranges, flags)."""


class LayerNotFoundError(ValidationError):
    """A layer name does not resolve to exactly one layer of the model."""


class NumericAbortError(FeatvisError):
    """Optimization hit a non-finite value; carries the iteration and term."""

    def __init__(self, iteration, term, message=""):
        self.iteration = iteration
        self.term = term
        detail = message or f"non-finite value in term '{term}' at iteration {iteration}"
        super().__init__(detail)
