"""Exception hierarchy. Each CLI-facing class carries its process exit code."""


class SFCError(Exception):
    exit_code = 1


class ConfigError(SFCError):
    exit_code = 2


class DependencyError(SFCError):
    """A training stage or decode was requested without its predecessor checkpoint."""

    exit_code = 3

    def __init__(self, stage, message=None):
        self.stage = stage
        super().__init__(message or f"missing predecessor stage: {stage}")


class DataError(SFCError):
    exit_code = 4


class DecodeError(SFCError):
    exit_code = 5


class BadMagicError(DecodeError):
    pass


class VersionError(DecodeError):
    pass


class ChecksumError(DecodeError):
    pass


class TruncatedError(DecodeError):
    pass
