"""Exception types shared across the pipeline, mapped to CLI exit codes."""


class ConfigError(Exception):
    """Invalid or inconsistent configuration (exit code 2)."""


class MissingArtifactError(Exception):
    """A required upstream artifact does not exist (exit code 3)."""


class NumericalError(Exception):
    """Non-finite values or diverging optimization (exit code 4)."""
