"""Exception types raised by chainforge.

Everything user-facing derives from ChainForgeError so callers (and the CLI)
can catch one base class.
"""


class ChainForgeError(Exception):
    """Base class for all chainforge errors."""


class StoreError(ChainForgeError):
    """Invalid, corrupt, or misused column store."""


class ChainTextError(ChainForgeError):
    """Malformed plain-text chain input; message carries the line number."""


class ExpressionError(ChainForgeError):
    """Expression source that cannot be parsed; message carries the position."""


class EvaluationError(ChainForgeError):
    """Domain error while evaluating an expression (log of <= 0, x/0, ...)."""


class GridError(ChainForgeError):
    """Invalid bin specification, grid mismatch, or bad region level."""


class OutputError(ChainForgeError):
    """Failure writing or reading an export (CSV/JSON document, plot file)."""
