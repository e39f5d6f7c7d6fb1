"""Exception hierarchy shared by every module."""


class RoutedAttnError(Exception):
    """Base class for all library errors."""


class GeometryError(RoutedAttnError, ValueError):
    """A tile, bucket or kernel size is incompatible with the token grid."""


class ContractError(RoutedAttnError, ValueError):
    """Inputs violate an operation's precondition (shapes, plans, masks)."""


class BoundsError(RoutedAttnError, IndexError):
    pass


class ConfigError(RoutedAttnError, ValueError):
    pass


class NumericError(RoutedAttnError, ArithmeticError):
    """Non-finite values appeared; ``stage`` names where."""

    def __init__(self, stage: str, detail: str = ""):
        self.stage = stage
        msg = f"non-finite values at stage '{stage}'"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class DivergenceError(RoutedAttnError, RuntimeError):
    pass


class FreezeViolation(RoutedAttnError, RuntimeError):
    """A frozen (non-router) parameter changed during router training."""


class MeasurementError(RoutedAttnError, RuntimeError):
    pass


class FormatError(RoutedAttnError, ValueError):
    """Malformed file: bad magic/version/dtype, or a CSV parse failure."""

    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
