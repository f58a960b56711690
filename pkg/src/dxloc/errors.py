"""Exception hierarchy shared by every module."""


class DxlocError(Exception):
    """Base class for all toolkit errors."""


class DataError(DxlocError):
    """Bad or inconsistent input data (CLI exit code 2)."""


class BadMagic(DataError):
    pass


class VersionMismatch(DataError):
    pass


class CorruptPayload(DataError):
    pass


class InvariantViolation(DataError, ValueError):
    pass


class DimensionMismatch(DataError, ValueError):
    pass


class IoFailure(DataError, OSError):
    pass


class EmptySequence(DataError, ValueError):
    pass


class NoWords(DataError, ValueError):
    pass


class EmptyVocabulary(DataError, ValueError):
    pass


class EmptyDatabase(DataError, ValueError):
    pass


class MissingGroundTruth(DataError):
    pass


class NoDepthPoints(DataError):
    pass


class GeometryError(DxlocError):
    pass


class BehindCamera(GeometryError, ValueError):
    pass


class DegenerateGeometry(GeometryError):
    pass


class TooFewCorrespondences(GeometryError, ValueError):
    pass


class SingularNormalEquations(GeometryError):
    pass


class NoConsensus(GeometryError):
    pass
