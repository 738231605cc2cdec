"""Exception taxonomy shared across modules.

The CLI maps these onto scriptable exit codes: configuration problems
exit 2, data problems exit 3, numeric divergence exits 4.
"""


class ConfigError(ValueError):
    """Invalid or unsatisfiable configuration."""


class DataError(RuntimeError):
    """Missing, corrupt, or inconsistent data on disk or in memory."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
