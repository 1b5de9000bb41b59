"""Exception types shared across the simulator."""


class ConfigurationError(ValueError):
    """An experiment or link configuration that cannot be run as requested."""


class DecodeError(ValueError):
    """A received payload that cannot be reconstructed (corrupt indices etc.)."""
