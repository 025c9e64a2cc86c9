from typing import List, Optional


class ModelError(Exception):
    """Base class for errors raised by the market-choice model."""


class ConfigError(ModelError, ValueError):
    """
    Raised when an experiment configuration or a parameter set is invalid.

    Args:
        message (str): Summary of the failure.
        problems (Optional[List[str]]): Field-level messages of the form
                                        "field.path: reason".
    """

    def __init__(self, message: str, problems: Optional[List[str]] = None):
        self.problems: List[str] = list(problems or [])
        detail = "; ".join(self.problems)
        super().__init__(f"{message}: {detail}" if detail else message)


class NumericalError(ModelError, ArithmeticError):
    """Raised when a numerical procedure cannot produce a valid result."""


class SchemaError(ConfigError):
    """Raised when a table handed to the plotting layer lacks columns."""
