"""meshsim: discrete-event simulation of Bluetooth-mesh flooding over BLE advertising."""

__version__ = "0.1.0"

from .errors import ConfigError

__all__ = ["ConfigError", "__version__"]
