"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or out-of-range argument caught at setup time."""


class UsageError(RuntimeError):
    """API misuse: malformed inputs, terminal-state stepping, empty batches."""
