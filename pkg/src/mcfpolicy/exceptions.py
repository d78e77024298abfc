"""Exception hierarchy. The CLI maps each class to an exit code."""


class McfPolicyError(Exception):
    exit_code = 1


class ConfigError(McfPolicyError, ValueError):
    """Invalid configuration or parameter combination."""

    exit_code = 2


class DataError(McfPolicyError, ValueError):
    """Input data that violates the schema or a precondition."""

    exit_code = 3


class NumericError(McfPolicyError, ArithmeticError):
    """A numerical procedure could not produce a valid result."""

    exit_code = 4
