"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class ThermoformerError(Exception):
    exit_code = 1


class ConfigError(ThermoformerError, ValueError):
    """Invalid configuration or shape contract; exit code 1."""

    exit_code = 1


class ShapeError(ConfigError):
    pass


class ContractError(ThermoformerError, ValueError):
    """A caller violated an operation's precondition."""

    exit_code = 1


class DataError(ThermoformerError, ValueError):
    exit_code = 2


class InsufficientDataError(DataError):
    pass


class SchemaError(DataError):
    pass


class NumericFault(ThermoformerError, ArithmeticError):
    exit_code = 3
