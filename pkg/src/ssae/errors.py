"""Exception hierarchy shared across the package."""


class SSAEError(Exception):
    exit_code = 1


class ParameterError(SSAEError, ValueError):
    exit_code = 2


class ShapeError(SSAEError, ValueError):
    exit_code = 4


class DataError(SSAEError):
    exit_code = 3


class ContractError(SSAEError, RuntimeError):
    exit_code = 1


class SequencingError(ContractError):
    pass


class DivergenceError(SSAEError, FloatingPointError):
    exit_code = 5


class UndefinedMetricError(SSAEError, ValueError):
    exit_code = 3


class ConfigError(SSAEError):
    exit_code = 2
