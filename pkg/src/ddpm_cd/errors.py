"""Exception hierarchy shared by every module.

The CLI maps these to exit codes: ``DataError``/``ConfigError`` -> 2,
``NumericError`` -> 3, anything else -> 1.
"""


class DdpmCdError(Exception):
    exit_code = 1


class ContractError(DdpmCdError):
    """A caller broke a precondition (wrong call order, missing grad, ...)."""


class DimensionError(DdpmCdError, ValueError):
    """Tensor shapes do not conform."""


class ConfigError(DdpmCdError, ValueError):
    exit_code = 2


class DataError(DdpmCdError, ValueError):
    exit_code = 2


class NumericError(DdpmCdError, ArithmeticError):
    exit_code = 3


class InvariantError(DdpmCdError):
    """An internal guarantee (e.g. frozen backbone) was violated."""
    exit_code = 3
