"""Exception types shared across the package."""


class PretuneError(Exception):
    """Base class for all package errors."""


class InvalidSpecError(PretuneError, ValueError):
    """A generator or patch specification cannot be satisfied."""


class ConfigError(PretuneError, ValueError):
    """Invalid configuration value, unknown key or incompatible settings."""


class CoverageError(PretuneError, ValueError):
    """Patches do not cover every voxel of the target grid."""


class DegenerateInputError(PretuneError, ValueError):
    """Input for which a loss is undefined (e.g. a zero-norm embedding)."""


class StrategyError(PretuneError, ValueError):
    """A tuning strategy selects nothing or cannot be applied to the model."""


class ManifestError(PretuneError, RuntimeError):
    """Checkpoint or run manifest does not match the requested architecture/config."""


class RunExistsError(PretuneError, RuntimeError):
    """A run with the same configuration digest already exists (use force to rerun)."""
