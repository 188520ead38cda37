"""Exception types shared across the package."""


class EdcaError(Exception):
    """Base class for all package errors."""


class ConfigError(EdcaError, ValueError):
    """Invalid configuration or scenario file.

    ``field`` names the offending entry (dotted path) and ``line`` the
    source line when the parser could recover one.
    """

    def __init__(self, message, field=None, line=None):
        self.message = message
        self.field = field
        self.line = line
        where = []
        if field is not None:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class NonConvergence(EdcaError, ArithmeticError):
    def __init__(self, message, residual=None, iterations=None):
        self.residual = residual
        self.iterations = iterations
        if residual is not None:
            message = f"{message} (residual={residual:.3e}, iterations={iterations})"
        super().__init__(message)


class OutOfRange(EdcaError, ValueError):
    """Attempt probability too aggressive: the implied CW_min is below 1."""


class DomainError(EdcaError, ValueError):
    pass


class Infeasible(EdcaError):
    def __init__(self, message, probe=None):
        self.probe = probe
        super().__init__(message)


class UncontrollableError(EdcaError):
    pass


class DimensionError(EdcaError, ValueError):
    pass
