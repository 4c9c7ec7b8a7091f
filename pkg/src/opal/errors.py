"""Exception types raised across the package."""


class OpalError(Exception):
    """Base class for all package errors."""


class SchemaError(OpalError):
    """Input log is missing a required column."""


class MalformedRowError(OpalError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SplitError(OpalError):
    """Interactions do not span enough windows for a temporal split."""


class SequenceTooShortError(OpalError):
    pass


class SamplingError(OpalError):
    """No admissible negative item exists for a user."""


class DegenerateBatchError(OpalError):
    """Total assignment mass of a batch is zero."""


class DivergenceError(OpalError):
    """Non-finite loss/gradient or a collapsed (zero-norm) embedding row."""


class CheckpointError(OpalError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class ConfigError(OpalError):
    pass
