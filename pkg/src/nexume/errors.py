"""Exception hierarchy shared by every nexume module."""


class NexumeError(Exception):
    """Base class for all library errors."""


class ValidationError(NexumeError, ValueError):
    """Bad input: malformed file, inconsistent shapes, out-of-range parameter."""


class RuntimeFailure(NexumeError, RuntimeError):
    """A run that started correctly but could not finish."""


# ehsim
class ParseError(ValidationError):
    pass


class EmptyTrace(ValidationError):
    pass


class NonMonotonicTime(ValidationError):
    pass


# devmodel
class UnknownKernelKind(ValidationError):
    pass


class ProfileError(ValidationError):
    pass


# kernels
class InvalidBitWidth(ValidationError):
    pass


class NonPositiveScale(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class KernelLongerThanInput(ShapeMismatch):
    pass


class ChannelCountMismatch(ShapeMismatch):
    pass


class AccumulatorOverflow(RuntimeFailure):
    """Fixed-point accumulation would leave the signed 64-bit range."""


# intermittent
class InfeasibleBudget(ValidationError):
    """Even a single loop iteration plus its checkpoint exceeds the budget."""


class VersionMismatch(ValidationError):
    pass


class CorruptSnapshot(ValidationError):
    pass


class Starvation(RuntimeFailure):
    """Simulated time waiting for energy exceeded the configured cap."""


# dynfit
class NonFiniteLoss(RuntimeFailure):
    pass


class NonFiniteHessian(RuntimeFailure):
    pass


class NonFiniteGradient(RuntimeFailure):
    pass


class TooManyNeuronsForExact(ValidationError):
    pass


class ZeroIterations(ValidationError):
    pass


# nas
class EmptySpace(ValidationError):
    pass


class NoFeasibleCandidate(RuntimeFailure):
    pass


# cli
class ConfigValidation(ValidationError):
    pass


class UnknownSubcommand(ValidationError):
    pass
