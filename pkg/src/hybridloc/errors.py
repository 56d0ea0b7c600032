"""Exception types shared across the package."""


class LocalizationError(Exception):
    """Base class for all errors raised by hybridloc."""


class NonMonotonicTime(LocalizationError):
    pass


class EmptySampleSet(LocalizationError):
    pass


class NonPositiveDt(LocalizationError):
    pass


class BehindCamera(LocalizationError):
    pass


class DurationMismatch(LocalizationError):
    pass


class DegenerateCovariance(LocalizationError):
    pass


class NonPsdCovariance(LocalizationError):
    pass


class EmptyMixture(LocalizationError):
    pass


class ParseError(LocalizationError):
    pass


class DegenerateDirection(LocalizationError):
    pass


class ParallelRay(LocalizationError):
    pass


class NegativeDepth(LocalizationError):
    pass


class InsufficientObservations(LocalizationError):
    pass


class SingularReducedBlock(LocalizationError):
    pass


class SingularInformation(LocalizationError):
    pass


class TriangulationDiverged(LocalizationError):
    pass


class EmptyOverlap(LocalizationError):
    pass


class ConfigError(LocalizationError):
    """Invalid run configuration; ``key`` names the offending dotted key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
