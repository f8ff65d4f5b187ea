"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class; the CLI maps these to exit code 1."""


class ContractError(EngineError):
    """A documented precondition of an operation was violated."""


class DimensionError(ContractError, ValueError):
    """Operand shapes do not agree."""


class ParameterError(ContractError, ValueError):
    """A scalar parameter is outside its legal range."""


class BudgetError(ContractError):
    """A workspace request exceeds the configured cap."""
