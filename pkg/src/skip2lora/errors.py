"""Exception types shared across the package."""


class ContractViolation(Exception):
    """A precondition of a kernel, layer or cache operation was broken."""


class ShapeError(ContractViolation, ValueError):
    """Operand shapes are incompatible."""


class DataError(ValueError):
    """A dataset file or generator spec is malformed."""
