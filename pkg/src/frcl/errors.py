"""Exception types shared across the package."""


class FrclError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(FrclError):
    pass


class NotPositiveDefinite(FrclError):
    pass


class OrderOutOfRange(FrclError):
    pass


class StaleCache(FrclError):
    pass


class NonFiniteInput(FrclError):
    pass


class EmptyBatch(FrclError):
    pass


class NonFiniteObjective(FrclError):
    """The training objective became NaN/inf; the run should abort."""


class DegeneratePrior(FrclError):
    pass


class ZeroVariance(FrclError):
    pass


class EmptyHoldout(FrclError):
    pass


class UnknownTask(FrclError):
    pass


class BadMagic(FrclError):
    pass


class TruncatedFile(FrclError):
    pass


class CountMismatch(FrclError):
    pass
