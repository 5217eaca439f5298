"""Exception types shared across the engine."""


class ConfigError(ValueError):
    """Invalid configuration, schema, or domain input (CLI exit code 2)."""


class ExecutionError(RuntimeError):
    """Failure while executing a composed study (CLI exit code 3)."""
