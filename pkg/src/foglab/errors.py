"""Exception hierarchy shared by every foglab module."""


class FogLabError(Exception):
    """Base class for all library errors."""


class SchemaError(FogLabError):
    """A required column or config key is missing or unknown."""


class ParseError(FogLabError):
    """A cell could not be parsed as a number."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class ValidationError(FogLabError, ValueError):
    """Input data violates a documented invariant."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class StratificationError(ValidationError):
    """A requested stratified split or fold layout is impossible."""


class SpecError(FogLabError, ValueError):
    """A layer specification chain does not compose."""


class NumericError(FogLabError, ArithmeticError):
    """Non-finite values were encountered."""


class AggregationError(FogLabError, ValueError):
    """Client weight layouts do not match."""
