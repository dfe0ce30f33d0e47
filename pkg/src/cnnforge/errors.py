"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class CnnForgeError(Exception):
    exit_code = 1


class InputError(CnnForgeError, ValueError):
    """Malformed or missing input (files, enums, headers)."""

    exit_code = 2


class ContractError(CnnForgeError, ValueError):
    """A precondition between components does not hold (e.g. dimension mismatch)."""

    exit_code = 3


class DivergenceError(CnnForgeError, ArithmeticError):
    """Cell dynamics left the finite/guarded region."""

    exit_code = 4

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class SearchError(CnnForgeError):
    exit_code = 4

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])
