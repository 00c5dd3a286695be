"""Exception hierarchy.

Everything raised on bad input derives from :class:`ProbGnnError`, so callers
(and the CLI) can separate validation failures from genuine bugs.  Runtime
failures that are not the caller's fault derive from :class:`RuntimeFailure`.
"""


class ProbGnnError(ValueError):
    """Base class for validation errors."""


class ShapeMismatch(ProbGnnError):
    pass


class DomainError(ProbGnnError):
    pass


class NonFinite(ProbGnnError):
    pass


class NotScalar(ProbGnnError):
    pass


class EmptyTape(ProbGnnError):
    pass


class DuplicateStation(ProbGnnError):
    pass


class ZeroDistance(ProbGnnError):
    pass


class MissingField(ProbGnnError):
    pass


class ZeroVariance(ProbGnnError):
    pass


class ZeroWeightSum(ProbGnnError):
    pass


class EmptyNeighborhood(ProbGnnError):
    pass


class POutOfRange(ProbGnnError):
    pass


class EmptyEnsemble(ProbGnnError):
    pass


class UnknownTimeOfDay(ProbGnnError):
    pass


class DropoutDisabled(ProbGnnError):
    pass


class EmptySplit(ProbGnnError):
    pass


class ZeroMeanTarget(ProbGnnError):
    pass


class InvalidSpec(ProbGnnError):
    pass


class SchemaError(ProbGnnError):
    pass


class NegativeDemand(ProbGnnError):
    pass


class OverlappingWindows(ProbGnnError):
    pass


class InsufficientHistory(ProbGnnError):
    pass


class CheckpointError(ProbGnnError):
    pass


class UsageError(ProbGnnError):
    """Bad command line: unknown flag, missing argument, malformed value."""


class RuntimeFailure(RuntimeError):
    """Base class for failures during an otherwise valid run."""


class DivergedLoss(RuntimeFailure):
    pass
