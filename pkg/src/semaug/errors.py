"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class EncodingError(ValueError):
    """Token ids that the encoder cannot process (e.g. out of vocabulary)."""
