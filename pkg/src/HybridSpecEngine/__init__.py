"""Hybrid retrieval/drafter speculative decoding for action-token models."""
from .config import apply_overrides, load_config
from .errors import (
    CalibrationFailedError,
    ConfigurationError,
    ConfigValidationError,
    EngineError,
    InsufficientWindowError,
    InvalidInputError,
    ParseError,
    SchemaError,
    VerifierError,
    VersionError,
)
from .harness import ablate, build_database, calibrate_skip, evaluate, record_demonstrations
from .models import EngineConfig, EngineMode, SDMode
from .retrieval_store import RetrievalStore
from .scheduler import Engine, Scheduler, decide_sd

__all__ = [
    "CalibrationFailedError",
    "ConfigValidationError",
    "ConfigurationError",
    "Engine",
    "EngineConfig",
    "EngineError",
    "EngineMode",
    "InsufficientWindowError",
    "InvalidInputError",
    "ParseError",
    "RetrievalStore",
    "SDMode",
    "Scheduler",
    "SchemaError",
    "VerifierError",
    "VersionError",
    "ablate",
    "apply_overrides",
    "build_database",
    "calibrate_skip",
    "decide_sd",
    "evaluate",
    "load_config",
    "record_demonstrations",
]
