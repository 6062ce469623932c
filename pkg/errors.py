"""
Exception hierarchy shared by every fedplant module.

Each error carries the process exit code that main.py reports for it.
"""

from typing import Optional


class FedPlantError(Exception):
    exit_code = 1


class ConfigError(FedPlantError):
    exit_code = 2


class DataError(FedPlantError):
    exit_code = 3


class ProtocolFailure(FedPlantError):
    """A session could not continue. `code` is the wire-level error code."""

    exit_code = 4

    def __init__(self, message: str, code: Optional[int] = None):
        super().__init__(message)
        self.code = code


class FrameError(ProtocolFailure):
    """A frame could not be decoded."""


class SecureAggregationError(FedPlantError):
    exit_code = 4


class DivergenceError(FedPlantError):
    exit_code = 5


class ContractError(ValueError):
    """Inputs violate an operation's dimensional contract."""
