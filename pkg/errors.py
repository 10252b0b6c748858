"""Exception hierarchy shared by every module of the biomarker miner."""


class TriLstmError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(TriLstmError, ValueError):
    """Operand dimensions do not conform."""


class BoundsError(TriLstmError, IndexError):
    """An index lies outside its valid range."""


class ConfigError(TriLstmError, ValueError):
    """A configuration value is invalid."""


class NumericError(TriLstmError, ArithmeticError):
    """A non-finite value reached an operation that requires finite input."""


class ProtocolError(TriLstmError):
    """Calls were made out of order or with mismatched artifacts (e.g. a stale tape)."""


class ValidationError(TriLstmError):
    """Loaded data violates a domain invariant."""


class CheckpointError(TriLstmError):
    """A checkpoint file is malformed or incompatible."""


class ParseError(TriLstmError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(f"{message}{where}")


class TrainingError(TriLstmError):
    def __init__(self, message, epoch=None, batch=None):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"{message} at epoch {epoch}, batch {batch}")


class AucUndefinedError(TriLstmError):
    """AUC needs both classes; `partial` holds whatever metrics could still be computed."""

    def __init__(self, message, partial=None):
        self.partial = partial
        super().__init__(message)
