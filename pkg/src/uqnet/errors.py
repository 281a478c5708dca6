"""Exception hierarchy shared across the package.

Every error carries a stable machine-readable ``code`` plus an optional
``context`` dict; the CLI maps codes to exit statuses and the HTTP service
maps them to response envelopes.
"""

from __future__ import annotations

from typing import Any


class UqnetError(Exception):
    """Base class; ``code`` is stable across releases."""

    code = "error"

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context = context

    def to_payload(self) -> dict:
        return {"code": self.code, "message": self.message, "context": self.context}


class ValidationError(UqnetError):
    """Bad user input: config, CSV, request bodies, flag values."""

    code = "validation_error"


class DimensionMismatchError(ValidationError):
    code = "dimension_mismatch"


class BindingError(ValidationError):
    """Graph binding does not resolve (unknown node, bad slot)."""

    code = "binding_error"


class CapabilityError(UqnetError):
    """Requested operation is outside the supported model class."""

    code = "capability_error"


class FitFailureError(UqnetError):
    """Estimation failed at every restart."""

    code = "fit_failure"


class NumericalError(UqnetError):
    """An internal numerical invariant was violated."""

    code = "numerical_error"


class StoreError(UqnetError):
    code = "store_error"


class ModelNotFoundError(StoreError):
    code = "model_not_found"


class DuplicateModelError(StoreError):
    code = "duplicate_model"


class VersionMismatchError(StoreError):
    code = "version_mismatch"


class CorruptModelError(StoreError):
    code = "corrupt_model"
