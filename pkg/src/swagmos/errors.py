"""Exception hierarchy.

Every error carries a category that the CLI maps to an exit code:
data/format problems exit 2, numerical failures exit 3.
"""


class SwagmosError(Exception):
    exit_code = 4


class DataError(SwagmosError):
    """Input files or records are missing, malformed or inconsistent."""

    exit_code = 2


class IntegrityError(DataError):
    pass


class FormatError(DataError):
    pass


class RangeError(DataError):
    pass


class EmptinessError(DataError):
    pass


class LabelError(DataError):
    pass


class CoverageError(DataError):
    pass


class SelectionError(DataError):
    pass


class MissingArtifactError(DataError):
    pass


class ShapeError(SwagmosError, ValueError):
    exit_code = 2


class NumericalError(SwagmosError):
    exit_code = 3


class SingularityError(NumericalError):
    pass


class DecompositionError(NumericalError):
    pass


class CurvatureError(NumericalError):
    pass


class DivergenceError(NumericalError):
    pass


class DegeneracyError(NumericalError):
    pass


class InsufficiencyError(NumericalError):
    pass


class EmptyRequestError(SwagmosError, ValueError):
    exit_code = 1
