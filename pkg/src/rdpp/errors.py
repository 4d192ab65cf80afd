"""Exception types shared across the package."""


class RdppError(Exception):
    """Base class for every error raised by this package."""


# autodiff
class TapeMismatch(RdppError):
    pass


class NonFinite(RdppError, ArithmeticError):
    pass


class HigherOrderUnavailable(RdppError):
    pass


class ShapeMismatch(RdppError, ValueError):
    pass


class EmptySequence(RdppError, ValueError):
    pass


class DomainError(RdppError, ValueError):
    pass


# gridworld
class ParseError(RdppError, ValueError):
    pass


class UnreachableGoal(RdppError):
    pass


class NoStart(RdppError, ValueError):
    pass


class TooFewGoals(RdppError, ValueError):
    pass


class BlockedOrigin(RdppError, ValueError):
    pass


class Unreachable(RdppError):
    pass


class HorizonExceeded(RdppError):
    pass


# observers / agents
class DegeneratePrior(RdppError, ValueError):
    pass


class InsufficientData(RdppError, ValueError):
    pass


class EmptyPrefix(RdppError, ValueError):
    pass


class PosteriorMismatch(RdppError, ValueError):
    pass


# metrics / harness
class EmptyWindow(RdppError, ValueError):
    pass


class MissingCheckpoint(RdppError, FileNotFoundError):
    pass


class ConfigError(RdppError, ValueError):
    pass


class MalformedCsv(RdppError, ValueError):
    pass
