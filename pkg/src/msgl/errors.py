"""Exception types shared across the package."""


class MSGLError(Exception):
    """Base class for all package errors."""


class DimensionError(MSGLError, ValueError):
    """Operand shapes do not conform to an operation's contract."""


class ContractError(MSGLError, ValueError):
    """A call violated a documented precondition."""


class ValidationError(MSGLError, ValueError):
    """Input data failed validation (bad file row, unknown id, ...)."""


class ConfigError(MSGLError, ValueError):
    """A configuration is inconsistent or cannot be trained."""


class NumericError(MSGLError, FloatingPointError):
    """A non-finite value appeared where finite values are required."""
