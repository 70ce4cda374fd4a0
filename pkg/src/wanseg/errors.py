class ContractError(ValueError):
    """Raised when an operation is called outside its documented preconditions."""
