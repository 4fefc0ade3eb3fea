"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated by the caller."""


class DomainError(ValueError):
    """A function was evaluated outside the region where it is finite."""


class ModeError(ValueError):
    """An operation was asked to run in a mode it does not define."""


class SpecError(ValueError):
    """A scene or configuration specification cannot be satisfied."""


class NumericError(RuntimeError):
    """A forward pass produced a non-finite intermediate."""
