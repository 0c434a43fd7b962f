"""Exception hierarchy. Every domain failure derives from ``StvoError`` so the
CLI can map it to exit code 1."""


class StvoError(Exception):
    pass


# geometry
class AngleNearPi(StvoError):
    pass


class BehindCamera(StvoError):
    pass


# dense ops
class ShapeMismatch(StvoError):
    pass


class TapeConsumed(StvoError):
    pass


class UnknownWeight(StvoError, KeyError):
    pass


class NonFiniteError(StvoError):
    pass


class BadDimensions(StvoError):
    pass


# temporal / spatial
class EmptyTargetSet(StvoError):
    pass


class InvalidDepth(StvoError):
    pass


class MissingDepthFile(StvoError):
    pass


class DegenerateBADepth(StvoError):
    pass


class MemoryBudgetExceeded(StvoError):
    pass


# solver
class SingularSystem(StvoError):
    pass


# evaluation
class NoAssociations(StvoError):
    pass


class DegenerateConfiguration(StvoError):
    pass


# ingestion
class MalformedIndex(StvoError):
    pass


class MissingImage(StvoError):
    pass


class FormatError(StvoError):
    pass


class MissingGroundTruth(StvoError):
    pass
