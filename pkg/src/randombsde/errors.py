"""Exception hierarchy.

Validation problems derive from :class:`InvalidInput`; failures of the
numerics derive from :class:`NumericalFailure`.  The CLI maps the two families
to distinct exit codes.
"""


class RandomBsdeError(Exception):
    """Base class for every error raised by the package."""


class InvalidInput(RandomBsdeError, ValueError):
    """Malformed problem, grid, configuration or argument."""


class NumericalFailure(RandomBsdeError, ArithmeticError):
    """The numerics produced something that cannot be trusted."""


class NonFiniteCoefficient(NumericalFailure):
    pass


class GridMismatch(InvalidInput):
    pass


class BlowUp(NumericalFailure):
    pass


class NonFiniteGain(NumericalFailure):
    pass


class DegenerateKernel(InvalidInput):
    pass


class SupportError(InvalidInput):
    pass


class CommonJump(NumericalFailure):
    pass


class NonPositiveIntensity(NumericalFailure):
    pass


class UnboundedIntensity(InvalidInput):
    pass


class LikelihoodOverflow(NumericalFailure):
    pass


class SingularRegression(NumericalFailure):
    pass


class BudgetExceeded(InvalidInput):
    pass


class NonMonotone(NumericalFailure):
    pass


class MissingU(InvalidInput):
    pass


class NoClosedForm(RandomBsdeError, LookupError):
    pass


class ConfigError(InvalidInput):
    pass
