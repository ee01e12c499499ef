"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when a value violates an operation's preconditions."""


class ContractViolation(RuntimeError):
    """Raised when a model adapter or persisted state breaks its contract.

    Examples: an unlabeled instance without a prediction, or a state file
    whose labeled set references unknown ids.
    """
