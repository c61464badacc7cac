"""Exception hierarchy.

Validation problems (bad inputs, inconsistent states) derive from
:class:`ValidationError`; failures of the numerics (singular designs,
non-convergence) derive from :class:`NumericalError`. The CLI maps the two
families to exit codes 2 and 3.
"""


class SparsePostError(Exception):
    pass


class ValidationError(SparsePostError, ValueError):
    pass


class NumericalError(SparsePostError, ArithmeticError):
    pass


class InvalidStateError(ValidationError):
    """Indicator state violates the hierarchy constraints of its prior."""


class InvalidMoveError(ValidationError):
    pass


class OutOfSupportError(ValidationError):
    pass


class DimensionError(ValidationError):
    pass


class ScenarioInfeasibleError(ValidationError):
    pass


class FeasibilityError(ValidationError):
    """Requested enumeration exceeds the configured model-count budget."""

    def __init__(self, message, count=None):
        super().__init__(message)
        self.count = count


class ConstantVariantError(ValidationError):
    pass


class DegenerateTraitError(ValidationError):
    pass


class SingularDesignError(NumericalError):
    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class InfeasibleModelError(NumericalError):
    """Model size too large for the g-prior (|Z| >= n); zero posterior mass."""


class SingularCovariateError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, message, max_change=None):
        super().__init__(message)
        self.max_change = max_change
