"""Exception hierarchy with machine-readable error codes.

Every error carries a short ``code`` (stable identifier for scripts), a
human message, and an optional context dict. ``exit_code`` follows the CLI
convention: 2 for usage/input problems, 1 for runtime failures.
"""

from __future__ import annotations


class DptabError(Exception):
    code = "error"
    exit_code = 1

    def __init__(self, message: str, *, code: str | None = None, **context):
        super().__init__(message)
        if code is not None:
            self.code = code
        self.context = context

    def to_json_dict(self) -> dict:
        return {"code": self.code, "message": str(self), "context": self.context}


class SchemaError(DptabError):
    code = "schema_invalid"
    exit_code = 2


class DataError(DptabError):
    code = "data_invalid"
    exit_code = 2


class ConfigError(DptabError):
    code = "config_invalid"
    exit_code = 2


class CheckpointError(DptabError):
    code = "checkpoint_invalid"
    exit_code = 2


class MetricError(DptabError):
    code = "metric_invalid"
    exit_code = 2


class NonFiniteError(DptabError):
    code = "non_finite_value"


class CalibrationError(DptabError):
    code = "calibration_infeasible"


class TrainingError(DptabError):
    code = "training_failed"


class ConvergenceError(DptabError):
    code = "no_convergence"
