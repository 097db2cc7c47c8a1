"""Exception types raised across the package."""


class IconExecError(Exception):
    """Base class for all package errors."""


class DomainError(IconExecError, ValueError):
    pass


class GridMismatch(IconExecError, ValueError):
    pass


class NonFiniteValue(IconExecError, ArithmeticError):
    pass


class SingularMatrix(IconExecError, ArithmeticError):
    pass


class FactorizationFailure(IconExecError, ArithmeticError):
    pass


class ParseError(IconExecError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(IconExecError, ValueError):
    pass


class PromptShapeMismatch(IconExecError, ValueError):
    pass


class ContextOverflow(IconExecError, ValueError):
    pass


class NonFiniteLoss(IconExecError, ArithmeticError):
    pass


class ZeroReference(IconExecError, ZeroDivisionError):
    pass


class ConfigError(IconExecError, ValueError):
    pass
