"""Exception types shared across modules."""


class ConfigError(ValueError):
    """Invalid configuration value or inconsistent component wiring."""
