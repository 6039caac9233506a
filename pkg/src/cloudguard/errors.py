"""Domain errors. Each carries a stable kebab-case ``code``."""

from __future__ import annotations


class DomainError(Exception):
    def __init__(self, code: str, message: str = ""):
        self.code = code
        super().__init__(f"{code}: {message}" if message else code)


class GraphError(DomainError):
    pass


class ProfileError(DomainError):
    pass


class NormalizationError(DomainError):
    pass


class PlaybookError(DomainError):
    def __init__(self, code: str, message: str = "", line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(code, message)


class RemediationError(DomainError):
    pass


class MetricError(DomainError):
    pass


class CalibrationError(DomainError):
    pass


class ScenarioError(DomainError):
    pass


class EvidenceError(DomainError):
    pass


class ConfigError(DomainError):
    pass
