"""Exception types shared across the package."""


class ContractError(ValueError):
    """Inputs violate an operation's shape or type contract."""


class ParameterError(ValueError):
    """A configuration value is outside its allowed range."""


class FormatError(ValueError):
    """A serialized artifact is malformed; the message names the bad field."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class UnsupportedMethodError(RuntimeError):
    """The scorer does not expose a capability the method requires."""
