"""Radio-level tuning mechanisms: transmit power control, extended advertising, relay subsets."""

import math
from collections import deque
from dataclasses import dataclass, field

from .engine import RandomSource
from .errors import ConfigError

EXT_INDICATION_OCTETS = 10
EXT_AUX_OFFSET_US = 1_000


@dataclass(frozen=True)
class PowerControlConfig:
    p_max_dbm: float = 0.0
    zeta_th_dbm: float = -70.0
    margin_db: float = 0.0      # additive headroom on top of the target floor
    floor_dbm: float = -20.0
    window: int = 16

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError(f"power-control window must be >= 1, got {self.window}")
        if self.floor_dbm > self.p_max_dbm:
            raise ConfigError(
                f"power floor {self.floor_dbm} dBm above maximum {self.p_max_dbm} dBm")


class RssiObserver:
    """Sliding-window minimum of overheard RSSI, kept per primary channel."""

    __slots__ = ("_windows",)

    def __init__(self, window: int):
        self._windows = {ch: deque(maxlen=window) for ch in (37, 38, 39)}

    def observe(self, channel: int, rssi_dbm: float) -> None:
        self._windows[channel].append(rssi_dbm)

    def channel_minima(self) -> dict:
        return {ch: min(w) for ch, w in self._windows.items() if w}

    def floor_dbm(self) -> float | None:
        """Min across the three per-channel minima; None until all have samples."""
        minima = self.channel_minima()
        if len(minima) < 3:
            return None
        return min(minima.values())


def controlled_power_dbm(cfg: PowerControlConfig, observer: RssiObserver) -> float:
    """Transmit power for the next advertising event.

    The dB form of the control law: p_max - p_r + zeta_th + margin, clamped
    to [floor, p_max].  The gate stays closed (full power) until every
    primary channel has contributed at least one sample.
    """
    p_r = observer.floor_dbm()
    if p_r is None:
        return cfg.p_max_dbm
    raw = cfg.p_max_dbm - p_r + cfg.zeta_th_dbm + cfg.margin_db
    return min(cfg.p_max_dbm, max(cfg.floor_dbm, raw))


@dataclass
class AuxPointer:
    """Shared target of one extended-advertising event's three indications."""

    channel: int
    start_us: int
    eligible: set = field(default_factory=set)


def select_relays(node_ids, fraction: float, rng: RandomSource,
                  acceptable=None, attempts: int = 200) -> frozenset:
    """ceil(fraction * N) node ids drawn uniformly without replacement.

    When `acceptable` is given the draw repeats (bounded) until the subset
    passes it; used to keep the relay-induced flood graph connected.
    """
    if not node_ids:
        raise ConfigError("relay selection over an empty node set")
    if not 0 < fraction <= 1:
        raise ConfigError(f"relay fraction must be in (0, 1], got {fraction}")
    k = math.ceil(fraction * len(node_ids))
    ordered = sorted(node_ids)
    for _ in range(attempts):
        chosen = frozenset(rng.sample(ordered, k))
        if acceptable is None or acceptable(chosen):
            return chosen
    raise ConfigError(
        f"no relay subset of size {k} passed the acceptance predicate in {attempts} draws")
