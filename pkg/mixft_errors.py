#!/usr/bin/env python3
"""
Exception hierarchy for MixFT
Every error carries the process exit code the CLI reports for it
"""


class MixftError(Exception):
    """Base class for all MixFT failures"""

    exit_code = 1


class ConfigError(MixftError, ValueError):
    """Invalid configuration value, unknown key or unknown mode"""

    exit_code = 2


class DataError(MixftError, ValueError):
    """Input data cannot be used as given"""

    exit_code = 3


class ParseError(DataError):
    """Malformed text input; `line` is 1-based"""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


class ShapeError(DataError):
    """Array length or shape does not match the model contract"""


class EmptyPartitionError(DataError):
    """A sub-domain received no windows"""

    def __init__(self, message: str, empty_components: list[int] | None = None):
        super().__init__(message)
        self.empty_components = empty_components or []


class MissingArtifactError(DataError):
    """An upstream artifact expected on disk is absent"""

    def __init__(self, path):
        super().__init__(f"Missing upstream artifact: {path}")
        self.path = path


class UndefinedMaseError(DataError):
    """Seasonal-naive error on the context is zero; MASE has no value"""


class NumericalError(MixftError, ArithmeticError):
    """Divergence, non-finite bound or bound decrease"""

    exit_code = 4


__all__ = [
    "MixftError",
    "ConfigError",
    "DataError",
    "ParseError",
    "ShapeError",
    "EmptyPartitionError",
    "MissingArtifactError",
    "UndefinedMaseError",
    "NumericalError",
]
