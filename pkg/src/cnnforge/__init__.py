"""Cellular nonlinear network feature generator and outcome-prediction pipeline."""

__version__ = "0.1.0"

from cnnforge.errors import (
    CnnForgeError,
    ContractError,
    DivergenceError,
    InputError,
    SearchError,
)

__all__ = [
    "__version__",
    "CnnForgeError",
    "ContractError",
    "DivergenceError",
    "InputError",
    "SearchError",
]
