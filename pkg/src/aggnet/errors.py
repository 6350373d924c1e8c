"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, ContractError
(including DataError) -> 2.
"""


class ContractError(ValueError):
    """An operation was called with arguments violating its contract."""


class DivergenceError(ContractError):
    """Training produced non-finite losses or gradients."""


class DataError(ContractError):
    """Input files or datasets are malformed or inconsistent."""


class ConfigError(ValueError):
    """A configuration file could not be parsed or validated."""
