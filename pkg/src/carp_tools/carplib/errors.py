class ContractError(ValueError):
    """Raised when a caller breaks the precondition of a library operation."""


def require(cond: bool, msg: str):
    if not cond:
        raise ContractError(msg)
