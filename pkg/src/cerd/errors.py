"""Exception hierarchy.

Every error carries an ``exit_code`` used by the command-line front end:
1 for usage/configuration problems, 2 for data problems, 3 for
internal-consistency failures.
"""


class CERDError(Exception):
    exit_code = 2


class DimensionError(CERDError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(CERDError, ValueError):
    """A hyperparameter is outside its valid range."""

    exit_code = 1


class ContractError(CERDError, ValueError):
    """A precondition of an operation does not hold."""


class EvaluationError(CERDError, ArithmeticError):
    """A function produced a non-finite value where a finite one is required."""


class DataIntegrityError(CERDError):
    """Raw data contradicts its availability mask or sentinel convention."""


class AlignmentError(DataIntegrityError):
    """Subject identifiers differ across the files of a bundle."""


class LabelError(CERDError):
    """A class label is unknown or out of range."""


class StratificationError(CERDError):
    """A split would leave a class absent from the training set."""


class ConfigurationError(CERDError):
    exit_code = 1


class CompatibilityError(CERDError):
    """A checkpoint does not match the modality catalog of the data."""


class TrainingDivergenceError(CERDError):
    def __init__(self, parameter: str, message: str | None = None):
        self.parameter = parameter
        super().__init__(message or f"non-finite gradient for parameter {parameter!r}")


class ConsistencyError(CERDError):
    """An invariant that must hold by construction was violated."""

    exit_code = 3
