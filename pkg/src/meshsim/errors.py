"""Error types shared across the simulator."""


class ConfigError(ValueError):
    """Fatal configuration problem: bad input file, bad parameter, impossible schedule."""
