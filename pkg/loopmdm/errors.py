"""Exception hierarchy for loopmdm.

Every error carries a human-readable message; the CLI maps the classes to
distinct exit codes (see `loopmdm.cli`).
"""
from __future__ import annotations
from typing import Any, Dict, Optional


class LoopMDMError(Exception):
    """Root of all loopmdm errors."""


class DimensionError(LoopMDMError, ValueError):
    """Shapes that should agree do not."""

    def __init__(self, message: str, *shapes: tuple):
        if shapes:
            message = f"{message} (shapes: {', '.join(str(tuple(s)) for s in shapes)})"
        super().__init__(message)
        self.shapes = shapes


class DomainError(LoopMDMError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConfigError(LoopMDMError, ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ContractError(LoopMDMError, RuntimeError):
    """A call contract was violated by the caller."""


class CheckpointError(LoopMDMError, IOError):
    def __init__(self, section: str, message: str):
        super().__init__(f"checkpoint section '{section}': {message}")
        self.section = section


class DatasetError(LoopMDMError, IOError):
    def __init__(self, path: str, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class NonFiniteLossError(LoopMDMError, ArithmeticError):
    def __init__(self, message: str, snapshot: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.snapshot = snapshot or {}
