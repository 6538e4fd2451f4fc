"""Shared exception types."""


class StlError(Exception):
    """Base class for all validation and evaluation errors in this package."""


class ParseError(StlError):
    """Formula text does not conform to the grammar.

    Carries the byte offset of the first offending character.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class IntervalError(StlError):
    """Temporal interval violates a >= 0 and b > a (with [0,0] as the only exception)."""


class TokenOverflowError(StlError):
    """Serialized formula does not fit within the configured maximum sequence length."""


class HorizonError(StlError):
    """Formula's temporal windows exceed the trajectory horizon."""


class DegenerateFormulaError(StlError):
    """Robustness vector has zero norm, so cosine similarity is undefined."""


class DepthUnreachableError(StlError):
    """Depth-forcing rewrite loop failed to reach the target depth within its budget."""


class GenerationError(StlError):
    """Dataset generation exhausted its validation-rejection retry budget."""


class ConfigError(StlError):
    """Invalid or unknown configuration key/value."""
