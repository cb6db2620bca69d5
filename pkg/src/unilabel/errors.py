"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions do not line up."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


class StateError(RuntimeError):
    """An object was used outside the lifecycle it was built for."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Input data is empty or malformed."""


class InfeasibleError(ValueError):
    """No mapping can satisfy the coverage constraints."""


class CapacityError(ValueError):
    """Instance exceeds the bound of an exhaustive routine."""


class IntegrityError(RuntimeError):
    """An invariant that should be impossible to break was broken."""


class ParseError(ValueError):
    """A file does not match its expected schema."""

    def __init__(self, path, field, message):
        self.path = str(path)
        self.field = field
        super().__init__(f"{self.path}: field {field!r}: {message}")
