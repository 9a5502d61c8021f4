"""Scalable face-image codec: a compact feature base layer with a learned residual enhancement layer."""

from .errors import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    DataError,
    DecodeError,
    DependencyError,
    SFCError,
    TruncatedError,
    VersionError,
)

__version__ = "0.1.0"
