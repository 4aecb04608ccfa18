"""Exception hierarchy. Every error carries the CLI exit code it maps to."""

from __future__ import annotations


class XbarError(Exception):
    exit_code = 1
    kind = "error"

    def __init__(self, message: str, **detail):
        super().__init__(message)
        self.detail = detail

    def to_dict(self) -> dict:
        return {"error": self.kind, "message": str(self), "exit_code": self.exit_code,
                "detail": self.detail}


class ConfigError(XbarError):
    exit_code = 2
    kind = "config"


class SchemaError(ConfigError):
    kind = "schema"


class DimensionError(SchemaError):
    kind = "dimension"


class CapacityError(XbarError):
    exit_code = 3
    kind = "capacity"


class LayoutError(CapacityError):
    kind = "layout"


class SchedulingError(CapacityError):
    kind = "scheduling"


class NumericError(XbarError):
    exit_code = 4
    kind = "numeric"


class DataError(NumericError):
    """Non-finite or otherwise unusable tensor data."""
    kind = "data"


class EncodingError(NumericError):
    kind = "encoding"


class RangeError(EncodingError):
    kind = "range"


class AccountingError(ConfigError):
    """A trace names a component the cost table does not know."""
    kind = "accounting"
