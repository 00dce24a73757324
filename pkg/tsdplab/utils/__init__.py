"""
Utility modules for tsdplab.
"""

from .logging import (
    BugReport,
    ErrorContext,
    ErrorHandler,
    PadReuseError,
    TSDPConfigError,
    TSDPDataError,
    TSDPError,
    TSDPFileError,
    TSDPIntegrityError,
    TSDPLogger,
    TSDPShapeError,
    TSDPTrainingError,
    TSDPValidationError,
    create_error_context,
    error_handler,
    logger,
    safe_execute,
    tsdplab_home,
)
from .rng import derive_seed, make_rng

__all__ = [
    "TSDPLogger",
    "TSDPError",
    "TSDPFileError",
    "TSDPDataError",
    "TSDPConfigError",
    "TSDPValidationError",
    "TSDPShapeError",
    "TSDPTrainingError",
    "TSDPIntegrityError",
    "PadReuseError",
    "ErrorHandler",
    "BugReport",
    "ErrorContext",
    "logger",
    "error_handler",
    "safe_execute",
    "create_error_context",
    "tsdplab_home",
    "derive_seed",
    "make_rng",
]
