#!/usr/bin/env python3
"""
Error taxonomy for the CQural continual-learning lab
Each error knows the CLI exit code it maps to
"""

from typing import Optional


class LabError(Exception):
    """Base class for every error raised by the lab"""

    exit_code: int = 1
    kind: str = "error"

    def diagnostic(self) -> str:
        """Single-line diagnostic printed by the CLI"""
        message = " ".join(str(self).split())
        return f"{self.kind}: {message}"


class ConfigError(LabError, ValueError):
    exit_code = 2
    kind = "config error"


class DataError(LabError, ValueError):
    exit_code = 3
    kind = "data error"


class FormatError(DataError):
    """Malformed dataset file; carries the byte offset or record index"""

    kind = "format error"

    def __init__(self, message: str, offset: Optional[int] = None, record: Optional[int] = None):
        details = []
        if offset is not None:
            details.append(f"byte offset {offset}")
        if record is not None:
            details.append(f"record {record}")
        suffix = f" ({', '.join(details)})" if details else ""
        super().__init__(f"{message}{suffix}")
        self.offset = offset
        self.record = record


class NumericError(LabError, ArithmeticError):
    exit_code = 4
    kind = "numeric error"


class DimensionError(LabError, ValueError):
    kind = "dimension error"


class UsageError(LabError, ValueError):
    kind = "usage error"


class ParameterError(LabError, ValueError):
    kind = "parameter error"


class QuantumStateError(LabError, ValueError):
    kind = "state error"
