"""Heartbeats-as-words ECG pipeline.

Loads multi-lead ECG recordings, detects R-peaks, renders each heartbeat
as a fixed-length token, and trains a masked transformer encoder on the
token sequences, either generatively (next-beat prediction) or as a
multi-label classifier.
"""

from . import autodiff, beat_tokenizer, dsp, ecg_io, training, transformer
from .errors import (
    BeatformerError,
    CheckpointMismatchError,
    ConfigError,
    EmptyInputError,
    FilterDesignError,
    FormatError,
    InconsistencyError,
    InvalidMetadataError,
    NoBeatsError,
)

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "beat_tokenizer",
    "dsp",
    "ecg_io",
    "training",
    "transformer",
    "BeatformerError",
    "CheckpointMismatchError",
    "ConfigError",
    "EmptyInputError",
    "FilterDesignError",
    "FormatError",
    "InconsistencyError",
    "InvalidMetadataError",
    "NoBeatsError",
    "__version__",
]
