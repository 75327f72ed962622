"""Exception types shared across the toolkit."""


class TubecertError(Exception):
    """Base class for all toolkit errors."""


class DimensionMismatchError(TubecertError):
    pass


class EmptyTighteningError(TubecertError):
    """Shrinking a constraint set by a tube left it empty.

    Signals that the design must shrink the tubes (more data, tighter
    feedback) or enlarge the constraints.
    """

    def __init__(self, msg: str, facet: int | None = None):
        super().__init__(msg)
        self.facet = facet


class NotABoxError(TubecertError):
    pass


class UnstableError(TubecertError):
    pass


class NoConvergenceError(TubecertError):
    pass


class IllConditionedError(TubecertError):
    pass


class InfeasibleAtCapError(TubecertError):
    pass


class OriginInfeasibleError(TubecertError):
    pass


class CapReachedError(TubecertError):
    pass


class InitiallyInfeasibleError(TubecertError):
    pass


class NoPreviousPlanError(TubecertError):
    pass


class ExcitationUnsafeError(TubecertError):
    pass


class LengthMismatchError(TubecertError):
    pass
