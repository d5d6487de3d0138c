"""Exception hierarchy.

``InputError`` subclasses signal bad input (CLI exit code 2);
``NumericalError`` subclasses signal optimizer or linear-algebra failure
(exit code 3).
"""


class QPSelectError(Exception):
    pass


class InputError(QPSelectError, ValueError):
    pass


class NumericalError(QPSelectError, ArithmeticError):
    pass


class NonFiniteError(InputError):
    def __init__(self, row, col, name=None):
        self.row = row
        self.col = col
        where = f"row {row}, column {col}" + (f" ({name!r})" if name is not None else "")
        super().__init__(f"non-finite or non-numeric value at {where}")


class DimensionMismatchError(InputError):
    pass


class DuplicateColumnError(InputError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"duplicate column name {name!r}")


class NonPositiveDispersionError(InputError):
    pass


class InsufficientSamplesError(InputError):
    pass


class WrongFamilyError(InputError):
    pass


class TooManyPredictorsError(InputError):
    pass


class NotNestedError(InputError):
    pass


class LengthMismatchError(InputError):
    pass


class TooFewBinsError(InputError):
    pass


class OptimizerDivergedError(NumericalError):
    pass


class SingularHessianError(NumericalError):
    pass


class SingularUError(NumericalError):
    pass
