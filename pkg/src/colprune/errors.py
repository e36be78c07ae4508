"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class ColpruneError(Exception):
    exit_code = 1


class ShapeError(ColpruneError, ValueError):
    exit_code = 2


class GatherIndexError(ColpruneError, IndexError):
    exit_code = 2


class DataError(ColpruneError):
    exit_code = 3


class CheckpointError(DataError):
    pass


class CorpusError(DataError):
    pass


class ResourceError(ColpruneError):
    exit_code = 3


class StatsLookupError(ColpruneError, KeyError):
    exit_code = 3

    def __str__(self):
        return Exception.__str__(self)


class NumericalError(ColpruneError):
    exit_code = 4


class NotPositiveDefinite(NumericalError):
    def __init__(self, pivot, message=None):
        self.pivot = pivot
        super().__init__(
            message or f"matrix is not positive definite (failed pivot {pivot})"
        )


class OracleError(NumericalError):
    pass


class TrainingError(NumericalError):
    pass


class PlanError(ColpruneError):
    exit_code = 5


class InfeasibleSparsityError(PlanError):
    def __init__(self, group, message):
        self.group = group
        super().__init__(message)


class ConsistencyError(ColpruneError, AssertionError):
    """Raised when block surgery leaves shapes inconsistent. Should be unreachable."""


class InputError(ColpruneError, ValueError):
    exit_code = 3
