"""Shared radio medium: path loss, airtime, occupancy and reception resolution.

The medium is time-sliced by the event kernel, never threaded.  A frame is
registered when its transmission begins and resolved for every candidate
receiver in a single event at the frame's end.  Reception requires, in
order: the receiver's scanner tuned to the frame's channel for the whole
frame (and not transmitting), received power at or above the PHY
sensitivity, and a capture margin over every overlapping frame on the same
channel.  At most one frame of an overlap group can qualify.

Wire-format headers of the mesh stack are folded into the per-PHY frame
overhead, so a frame's pdu_octets is just its payload size.
"""

import math
from collections import deque
from dataclasses import dataclass
from enum import Enum

from .engine import Engine, RandomSource
from .errors import ConfigError

PRIMARY_CHANNELS = (37, 38, 39)
ALL_CHANNELS = tuple(range(40))

# safety lag (µs) for pruning occupancy/tx-interval history; must exceed the
# longest frame airtime the config can produce
_PRUNE_LAG_US = 5_000


@dataclass(frozen=True)
class PhyMode:
    name: str
    bit_rate: int          # bits/s
    overhead_octets: int   # preamble+access address+header+CRC equivalent


PHY_1M = PhyMode("1M", 1_000_000, 10)
PHY_2M = PhyMode("2M", 2_000_000, 11)


def airtime_us(pdu_octets: int, phy: PhyMode) -> int:
    """On-air time in µs of a PDU with the PHY's fixed per-frame overhead."""
    if pdu_octets < 1:
        raise ConfigError(f"airtime of empty frame ({pdu_octets} octets)")
    return (phy.overhead_octets + pdu_octets) * 8 * 1_000_000 // phy.bit_rate


def path_loss_db(
    distance_m: float,
    *,
    ref_loss_db: float = 40.0,
    exponent: float = 2.7,
    ref_distance_m: float = 1.0,
) -> float:
    """Log-distance path loss; shadowing is added separately per frame."""
    if distance_m <= 0:
        raise ConfigError(f"path loss of non-positive distance {distance_m}")
    return ref_loss_db + 10.0 * exponent * math.log10(distance_m / ref_distance_m)


def received_power_dbm(tx_power_dbm: float, loss_db: float, shadow_db: float = 0.0) -> float:
    return tx_power_dbm - loss_db + shadow_db


class FrameKind(Enum):
    ADV = "adv"          # legacy advertising PDU, primary channels only
    EXT_IND = "ext_ind"  # extended-advertising indication, primary channels only
    AUX = "aux"          # auxiliary data frame on a secondary channel
    NOISE = "noise"      # background interferer, any channel


class Outcome(Enum):
    DELIVERED = "delivered"
    NOT_LISTENING = "not-listening"
    BELOW_SENSITIVITY = "below-sensitivity"
    COLLISION = "collision"


class ChannelFrame:
    """One on-air frame.  end - start always equals airtime(octets, phy)."""

    __slots__ = (
        "transmitter", "channel", "phy", "power_dbm", "start", "end",
        "octets", "kind", "payload", "eligible", "rssi_cache",
    )

    def __init__(self, transmitter, channel, phy, power_dbm, start, octets,
                 kind=FrameKind.ADV, payload=None, eligible=None):
        if kind in (FrameKind.ADV, FrameKind.EXT_IND):
            if channel not in PRIMARY_CHANNELS:
                raise ConfigError(f"{kind.value} frame on channel {channel}: primary channels only")
        elif kind is FrameKind.AUX:
            if not 0 <= channel <= 36:
                raise ConfigError(f"aux frame on channel {channel}: secondary channels only")
        elif channel not in ALL_CHANNELS:
            raise ConfigError(f"frame on unknown channel {channel}")
        self.transmitter = transmitter
        self.channel = channel
        self.phy = phy
        self.power_dbm = power_dbm
        self.start = start
        self.end = start + airtime_us(octets, phy)
        self.octets = octets
        self.kind = kind
        self.payload = payload
        self.eligible = eligible       # receiver-id set for AUX frames
        self.rssi_cache = {}           # receiver id -> dBm, drawn once per frame


class LinkModel:
    """Pairwise propagation state: symmetric loss matrix plus per-frame shadowing."""

    def __init__(self, loss: dict, *, shadowing_sigma_db: float = 4.0,
                 capture_db: float = 10.0,
                 sensitivity_dbm: dict | None = None):
        if capture_db <= 0:
            raise ConfigError(f"capture threshold must be positive, got {capture_db}")
        if shadowing_sigma_db < 0:
            raise ConfigError(f"negative shadowing sigma {shadowing_sigma_db}")
        self.shadowing_sigma_db = shadowing_sigma_db
        self.capture_db = capture_db
        self.sensitivity = dict(sensitivity_dbm or {PHY_1M.name: -90.0, PHY_2M.name: -85.0})
        self._loss = {}
        for (a, b), v in loss.items():
            other = loss.get((b, a))
            if other is not None and other != v:
                raise ConfigError(f"asymmetric loss for pair ({a}, {b}): {v} vs {other}")
            self._loss[(a, b)] = v
            self._loss[(b, a)] = v

    def loss_db(self, a, b) -> float:
        return self._loss[(a, b)]

    def sensitivity_dbm(self, phy: PhyMode) -> float:
        return self.sensitivity[phy.name]

    def nodes_heard_from(self, tx, candidates, max_power_dbm: float):
        """Receivers whose mean RSSI can plausibly clear sensitivity (6-sigma slack)."""
        floor = min(self.sensitivity.values())
        slack = 6.0 * self.shadowing_sigma_db
        out = []
        for rx in candidates:
            if rx == tx:
                continue
            if max_power_dbm - self._loss[(tx, rx)] >= floor - slack:
                out.append((rx, self._loss[(tx, rx)]))
        return out


class _Receiver:
    __slots__ = ("node_id", "scan_interval_us", "scan_window_us", "chan_rng",
                 "on_frame", "on_rssi")

    def __init__(self, node_id, scan_interval_us, scan_window_us, chan_rng,
                 on_frame, on_rssi):
        self.node_id = node_id
        self.scan_interval_us = scan_interval_us
        self.scan_window_us = scan_window_us
        self.chan_rng = chan_rng
        self.on_frame = on_frame
        self.on_rssi = on_rssi


class Medium:
    """Channel occupancy registry plus the reception-resolution rules."""

    def __init__(self, engine: Engine, link: LinkModel):
        self.engine = engine
        self.link = link
        self._receivers: dict = {}
        self._channel_frames: dict[int, deque] = {c: deque() for c in ALL_CHANNELS}
        self._tx_intervals: dict = {}
        self._candidates: dict = {}
        self._max_power_dbm = 0.0
        self._blackouts: list = []
        self._uniform_scan: tuple[int, int] | None = None
        self.outcome_counts = {o: 0 for o in Outcome}

    def register(self, node_id, scan_interval_us, scan_window_us, chan_rng: RandomSource,
                 on_frame, on_rssi=None) -> None:
        if node_id in self._receivers:
            raise ConfigError(f"duplicate radio registration for {node_id!r}")
        self._receivers[node_id] = _Receiver(
            node_id, scan_interval_us, scan_window_us, chan_rng, on_frame, on_rssi)
        self._tx_intervals[node_id] = deque()

    def finalize(self, max_power_dbm: float) -> None:
        """Precompute per-transmitter candidate receiver lists."""
        self._max_power_dbm = max_power_dbm
        ids = list(self._receivers)
        for tx in ids:
            self._candidates[tx] = self.link.nodes_heard_from(tx, ids, max_power_dbm)
        scans = {(r.scan_interval_us, r.scan_window_us)
                 for r in self._receivers.values()}
        # shared scan config lets _resolve_all test the channel once per frame
        self._uniform_scan = scans.pop() if len(scans) == 1 else None

    # -- test hook: force total loss inside a time window ---------------------
    def add_blackout(self, start_us: int, end_us: int, pair=None) -> None:
        self._blackouts.append((start_us, end_us, pair))

    def _blacked_out(self, tx, rx, start) -> bool:
        for b0, b1, pair in self._blackouts:
            if b0 <= start < b1 and (pair is None or pair == (tx, rx)):
                return True
        return False

    # -------------------------------------------------------------------------
    def begin_transmission(self, frame: ChannelFrame) -> None:
        """Register a frame on the air and schedule its resolution at frame.end."""
        now = self.engine.now
        intervals = self._tx_intervals.get(frame.transmitter)
        if intervals is not None:  # virtual interferers are not registered nodes
            assert not intervals or frame.start >= intervals[-1][1], (
                f"node {frame.transmitter!r} already transmitting at t={frame.start}"
            )
            intervals.append((frame.start, frame.end))
            while intervals and intervals[0][1] + _PRUNE_LAG_US < now:
                intervals.popleft()
        reg = self._channel_frames[frame.channel]
        reg.append(frame)
        while reg and reg[0].end + _PRUNE_LAG_US < now:
            reg.popleft()
        if frame.kind is not FrameKind.NOISE:
            self.engine.schedule(frame.end, self._resolve_all, frame)

    def _resolve_all(self, frame: ChannelFrame) -> None:
        counts = self.outcome_counts
        candidates = self._candidates[frame.transmitter]
        known_listening = False
        if frame.kind is FrameKind.AUX:
            pool = frame.eligible or ()
            candidate_ids = [rx for rx, _ in candidates if rx in pool]
            known_listening = True      # eligibility replaces scanning
        else:
            candidate_ids = [rx for rx, _ in candidates]
            if self._uniform_scan is not None:
                interval, window = self._uniform_scan
                k = frame.start // interval
                if 37 + k % 3 != frame.channel \
                        or frame.end > k * interval + window:
                    counts[Outcome.NOT_LISTENING] += len(candidate_ids)
                    return
                known_listening = True
        overlaps = [o for o in self._channel_frames[frame.channel]
                    if o is not frame
                    and o.start < frame.end and frame.start < o.end]
        receivers = self._receivers
        tx_intervals = self._tx_intervals
        listening = self._listening
        rssi_at = self.rssi_at
        sens = self.link.sensitivity_dbm(frame.phy)
        capture = self.link.capture_db
        primary = frame.channel >= 37
        start, end = frame.start, frame.end
        n_nl = n_bs = n_col = n_del = 0
        for rx in candidate_ids:
            receiver = receivers[rx]
            if not known_listening and not listening(receiver, frame):
                n_nl += 1
                continue
            for s, e in tx_intervals[rx]:
                if s < end and start < e:
                    break
            else:
                rssi = rssi_at(frame, rx)
                if rssi < sens:
                    n_bs += 1
                    continue
                for other in overlaps:
                    if rssi - rssi_at(other, rx) < capture:
                        captured = False
                        break
                else:
                    captured = True
                if primary and receiver.on_rssi is not None:
                    receiver.on_rssi(frame.channel, rssi)
                if captured:
                    n_del += 1
                    receiver.on_frame(frame, rssi)
                else:
                    n_col += 1
                continue
            n_nl += 1      # half duplex: receiver was transmitting
        if n_nl:
            counts[Outcome.NOT_LISTENING] += n_nl
        if n_bs:
            counts[Outcome.BELOW_SENSITIVITY] += n_bs
        if n_col:
            counts[Outcome.COLLISION] += n_col
        if n_del:
            counts[Outcome.DELIVERED] += n_del

    def _dispatch(self, rx, frame, out, rssi) -> None:
        receiver = self._receivers[rx]
        if rssi is not None and frame.channel >= 37 and receiver.on_rssi is not None:
            receiver.on_rssi(frame.channel, rssi)
        if out is Outcome.DELIVERED:
            receiver.on_frame(frame, rssi)

    def _listening(self, receiver: _Receiver, frame: ChannelFrame) -> bool:
        interval = receiver.scan_interval_us
        k = frame.start // interval
        if 37 + (k % 3) != frame.channel:
            return False
        return frame.end <= k * interval + receiver.scan_window_us

    def _transmitting_during(self, node_id, start, end) -> bool:
        for s, e in self._tx_intervals[node_id]:
            if s < end and start < e:
                return True
        return False

    def rssi_at(self, frame: ChannelFrame, rx) -> float:
        """Per-(frame, receiver) received power; the shadow draw is cached."""
        cached = frame.rssi_cache.get(rx)
        if cached is not None:
            return cached
        if frame.kind is FrameKind.NOISE:
            rssi = frame.power_dbm
        else:
            shadow = self._receivers[rx].chan_rng.draw_normal(0.0, self.link.shadowing_sigma_db)
            rssi = frame.power_dbm - self.link.loss_db(frame.transmitter, rx) + shadow
        if self._blackouts and self._blacked_out(frame.transmitter, rx, frame.start):
            rssi = -math.inf
        frame.rssi_cache[rx] = rssi
        return rssi

    def resolve_reception(self, rx, frame: ChannelFrame, overlaps=None):
        """Apply the reception rules for one receiver; returns (Outcome, rssi|None).

        rssi is reported whenever the receiver was listening and the frame
        cleared sensitivity, including frames that then lost on capture.
        """
        receiver = self._receivers[rx]
        if frame.kind is FrameKind.AUX:
            if frame.eligible is None or rx not in frame.eligible:
                return Outcome.NOT_LISTENING, None
        elif not self._listening(receiver, frame):
            return Outcome.NOT_LISTENING, None
        if self._transmitting_during(rx, frame.start, frame.end):
            return Outcome.NOT_LISTENING, None
        rssi = self.rssi_at(frame, rx)
        if rssi < self.link.sensitivity_dbm(frame.phy):
            return Outcome.BELOW_SENSITIVITY, None
        if overlaps is None:
            overlaps = [o for o in self._channel_frames[frame.channel]
                        if o is not frame
                        and o.start < frame.end and frame.start < o.end]
        capture = self.link.capture_db
        for other in overlaps:
            if rssi - self.rssi_at(other, rx) < capture:
                return Outcome.COLLISION, rssi
        return Outcome.DELIVERED, rssi
