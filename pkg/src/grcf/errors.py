"""Exception types shared across the package."""


class GRCFError(Exception):
    """Base class for all package errors."""


class ShapeError(GRCFError, ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


class DomainError(GRCFError, ValueError):
    pass


class NonFiniteError(GRCFError, FloatingPointError):
    pass


class GradientError(GRCFError, RuntimeError):
    pass


class ConfigError(GRCFError, ValueError):
    pass


class DataError(GRCFError, ValueError):
    pass


class MetricError(GRCFError, ValueError):
    pass


class DivergenceError(GRCFError, RuntimeError):
    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good
