"""Exception types shared across the toolkit."""


class ProbekitError(Exception):
    """Base class for all toolkit errors."""


class ParseError(ProbekitError, ValueError):
    """A file could not be parsed; the message names the file and line."""


class ValidationError(ProbekitError, ValueError):
    """Parsed or in-memory data violates a documented invariant."""


class StoreFormatError(ProbekitError, ValueError):
    """An embedding store or checkpoint file is corrupt or incompatible."""


class ConfigError(ProbekitError, ValueError):
    """A training/CLI configuration value is missing or out of bounds."""


class TrainingDiverged(ProbekitError, RuntimeError):
    """The training loss became non-finite; carries epoch/batch diagnostics."""
