"""Exception hierarchy. Each class carries the CLI exit code it maps to."""

from __future__ import annotations


class EmosteerError(Exception):
    exit_code = 1
    tag = "error"


class InputError(EmosteerError, ValueError):
    exit_code = 2
    tag = "input-error"


class ConfigurationError(InputError):
    tag = "config-error"


class PlanValidationError(InputError):
    tag = "plan-error"


class EmptyPairingError(InputError):
    tag = "empty-pairing"


class IntegrityError(EmosteerError):
    exit_code = 3
    tag = "integrity-error"


class DegenerateInjectionError(IntegrityError, ZeroDivisionError):
    tag = "degenerate-injection"


class DegenerateProbeError(InputError):
    tag = "degenerate-probe"


class DegenerateEmbeddingError(IntegrityError):
    tag = "degenerate-embedding"


class UndefinedCorrelationError(InputError):
    tag = "undefined-correlation"


class ReferenceQualityError(EmosteerError):
    exit_code = 5
    tag = "reference-quality"

    def __init__(self, message: str, accuracy: float):
        super().__init__(message)
        self.accuracy = accuracy


class SelectionError(EmosteerError):
    exit_code = 4
    tag = "infeasible-selection"

    def __init__(self, message: str, closest=None):
        super().__init__(message)
        self.closest = closest


class TrainingFailure(EmosteerError):
    exit_code = 5
    tag = "training-failure"

    def __init__(self, message: str, metrics: dict | None = None):
        super().__init__(message)
        self.metrics = metrics or {}
