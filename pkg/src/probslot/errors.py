"""Exception types shared across the package."""


class ContractError(ValueError):
    """A precondition on an input was violated (shape, range, domain)."""


class UnsupportedSizeError(ContractError):
    """The requested size is beyond what the routine will evaluate."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values (divergence, overflow)."""
