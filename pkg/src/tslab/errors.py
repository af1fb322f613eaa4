"""Shared exception types."""


class ConfigurationError(ValueError):
    """A parameter combination that the contracts forbid."""


class IngestionError(ValueError):
    """A dataset file that cannot be parsed; message names the offending row/cell."""


class CheckpointError(ValueError):
    """A checkpoint archive that is missing tensors or has mismatched shapes."""


class UndefinedStatisticError(ValueError):
    """A diagnostic statistic whose denominator vanishes (e.g. all-zero residuals)."""
