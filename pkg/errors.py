from __future__ import annotations
from typing import Any


class DecompError(Exception):
    """Base class for every error raised by the decomposition toolkit."""

    exit_code: int = 1


class ConfigError(DecompError, ValueError):
    exit_code = 2

    def __init__(self, message: str, fields: tuple[str, ...] = ()):
        super().__init__(message)
        self.fields = fields


class SpellFormatError(DecompError, ValueError):
    """A row of a spell file could not be parsed."""

    exit_code = 3

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class SpellValidationError(DecompError, ValueError):
    """A spell violates a record invariant."""

    exit_code = 3

    def __init__(self, reason: str, record_id: Any = None, row: int | None = None):
        where = f"record {record_id!r}" if record_id is not None else f"row {row}"
        super().__init__(f"{where}: {reason}")
        self.reason = reason
        self.record_id = record_id
        self.row = row


class HorizonError(DecompError, ValueError):
    exit_code = 3


class CoverageError(DecompError, ValueError):
    exit_code = 3


class EmptyCellError(DecompError, ValueError):
    """A conditioning set needed by an estimator is empty (overlap violation)."""

    exit_code = 4

    def __init__(self, t: int, z: int, stratum: str):
        super().__init__(
            f"empty risk set at period t={t}, regime z={z}, stratum {stratum!r}; "
            "the overlap condition fails here, consider a coarser time grid or the carry-forward policy"
        )
        self.t = t
        self.z = z
        self.stratum = stratum


class IdentificationError(DecompError, ValueError):
    exit_code = 4

    def __init__(self, message: str, parameters: list[str]):
        super().__init__(f"{message}: {', '.join(parameters)}")
        self.parameters = parameters


class SingularInformationError(DecompError, RuntimeError):
    exit_code = 5

    def __init__(self, message: str, parameters: list[str]):
        super().__init__(f"{message}: {', '.join(parameters)}")
        self.parameters = parameters


class ConvergenceError(DecompError, RuntimeError):
    exit_code = 5

    def __init__(self, message: str, best: Any = None, trace: list | None = None):
        super().__init__(message)
        self.best = best
        self.trace = trace or []


class NumericalError(DecompError, RuntimeError):
    exit_code = 5


class RegimeError(DecompError, ValueError):
    """The data do not contain both regimes."""

    exit_code = 4
