"""Exception taxonomy shared across the toolkit."""


class MatteError(Exception):
    """Base class for all toolkit errors."""

    category = "error"


class GridError(MatteError):
    """Invalid conditioning grid: bad partition, missing cell, bad key."""

    category = "grid"


class ConfigError(MatteError):
    """Invalid or inconsistent configuration input."""

    category = "config"


class BackendError(MatteError):
    """Backend construction or execution failure."""

    category = "backend"


class EncoderError(MatteError):
    """Text/image encoding failure (length limits, unknown placeholders)."""

    category = "encoder"


class InversionError(MatteError):
    """Token optimization failure (non-finite loss, bad setup)."""

    category = "inversion"


class EvalError(MatteError):
    """Evaluation protocol failure."""

    category = "eval"
