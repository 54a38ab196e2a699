"""Physics-guided underwater image enhancement and depth estimation."""

from physuie.errors import (
    ConfigError,
    ContractError,
    DataError,
    DivergenceError,
    PhysUIEError,
    SingularityError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "DivergenceError",
    "PhysUIEError",
    "SingularityError",
    "ValidationError",
    "__version__",
]
