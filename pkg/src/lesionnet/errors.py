"""Exception hierarchy.

Errors caused by bad input (shapes, files, configs, labels) derive from
``ValidationError`` and map to CLI exit status 1; everything else that goes
wrong at run time maps to exit status 2.
"""


class LesionNetError(Exception):
    exit_code = 2


class ValidationError(LesionNetError, ValueError):
    exit_code = 1


class ShapeError(ValidationError):
    pass


class SizeError(ValidationError):
    pass


class AxisError(ValidationError):
    pass


class RankError(ValidationError):
    pass


class GraphError(LesionNetError):
    """Loss is not connected to any recorded computation."""


class ConfigError(ValidationError):
    pass


class FormatError(ValidationError):
    pass


class CorruptionError(FormatError):
    pass


class IntegrityError(ValidationError):
    pass


class TaxonomyError(ValidationError):
    pass


class DuplicateError(ValidationError):
    pass


class CapacityError(ValidationError):
    pass


class EmptyDatasetError(ValidationError):
    pass


class UsageError(ValidationError):
    pass


class LabelIndexError(ValidationError, IndexError):
    pass


class DegenerateError(ValidationError):
    pass


class UndefinedRecallError(ValidationError):
    pass


class StructureError(ValidationError):
    pass


class DivergenceError(LesionNetError, ArithmeticError):
    pass
