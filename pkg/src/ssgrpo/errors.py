"""Exception types shared across the package.

The CLI maps these onto exit codes, so every failure that can escape a
command derives from one of the four families below.
"""

from __future__ import annotations


class ConfigError(ValueError):
    """Bad configuration value (exit code 2)."""


class DataError(ValueError):
    """Malformed or inconsistent data (exit code 3)."""


class ProviderError(RuntimeError):
    """Similarity scorer failure (exit code 4)."""


class NumericError(ArithmeticError):
    """Non-finite quantity during optimization (exit code 5)."""


class InvalidConfig(ConfigError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class UnknownSample(DataError, KeyError):
    def __init__(self, sample_id: str):
        super().__init__(f"unknown sample id {sample_id!r}")
        self.sample_id = sample_id

    def __str__(self) -> str:  # KeyError would repr() the message
        return self.args[0]


class ChoiceOutOfRange(DataError):
    pass


class GroupTooSmall(ConfigError):
    pass


class GenerationExhausted(DataError):
    pass


class LengthMismatch(DataError):
    pass


class EmptyInput(DataError):
    pass


class RaggedGrid(DataError):
    pass


class CheckpointVersionError(DataError):
    pass


class ProviderUnavailable(ProviderError):
    """Scorer unreachable, disconnected, or too slow."""


class ProviderTimeout(ProviderUnavailable):
    pass


class ProtocolError(ProviderError):
    """Response violated the wire contract (bad JSON, id mismatch, range)."""


class RemoteError(ProviderError):
    """Scorer answered with an explicit error field."""


class NonFiniteObjective(NumericError):
    pass
