"""Exception hierarchy. Every error the CLI reports maps to one class here."""


class MFCTMDPError(Exception):
    """Base class for all package errors."""


class EmptySourceState(MFCTMDPError, ValueError):
    pass


class SameState(MFCTMDPError, ValueError):
    pass


class UnknownModel(MFCTMDPError, KeyError):
    pass


class InvalidParameter(MFCTMDPError, ValueError):
    pass


class HorizonNotCovered(MFCTMDPError, ValueError):
    pass


class InfiniteHorizonUntruncated(MFCTMDPError, ValueError):
    pass


class LatticeTooLarge(MFCTMDPError, MemoryError):
    pass


class UndiscountedInfinite(MFCTMDPError, ValueError):
    pass


class StepTooLarge(MFCTMDPError, ValueError):
    pass


class ProjectionTooLarge(MFCTMDPError, ArithmeticError):
    pass


class BracketFailure(MFCTMDPError, RuntimeError):
    pass


class MaxIterations(MFCTMDPError, RuntimeError):
    pass


class UnknownExample(MFCTMDPError, KeyError):
    pass


class CoupledActionsUnsupported(MFCTMDPError, NotImplementedError):
    """Raised by solvers that need per-state independent action choice."""
