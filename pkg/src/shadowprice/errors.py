"""Exception hierarchy shared by all modules."""


class ShadowPriceError(Exception):
    """Base class for every error raised by the package."""


class TreeError(ShadowPriceError, ValueError):
    pass


class NonpositiveProbability(TreeError):
    pass


class ChildSumMismatch(TreeError):
    pass


class OrphanAtom(TreeError):
    pass


class LevelMismatch(TreeError):
    pass


class MarketError(ShadowPriceError, ValueError):
    pass


class InvalidCostRate(MarketError):
    pass


class NonpositiveNumeraire(MarketError):
    pass


class ShapeMismatch(ShadowPriceError, ValueError):
    pass


class SolverError(ShadowPriceError, RuntimeError):
    """Raised when the convex program cannot be solved to tolerance."""


class Infeasible(SolverError):
    pass


class Unbounded(SolverError):
    pass


class MaxIterations(SolverError):
    pass


class DomainEmpty(SolverError):
    pass


class NonnegativeNu(ShadowPriceError, ValueError):
    pass


class BoundsViolation(ShadowPriceError, ValueError):
    pass


class NegativeLambda(ShadowPriceError, ValueError):
    pass


class InstanceTooLarge(ShadowPriceError, ValueError):
    pass


class MarketFileError(ShadowPriceError, ValueError):
    """Parse or validation error in a market description file.

    ``location`` names the offending field path (``assets.eps_bid``) or a
    ``line N`` marker for syntax errors.
    """

    def __init__(self, location, message):
        self.location = location
        self.message = message
        super().__init__(f"{location}: {message}")
