"""Per-node mesh protocol machine: advertising bearer, managed flooding, transport.

Message path, source to destination:

* publish() splits the access payload into transport chunks, numbers each
  network PDU from the node's own 24-bit sequence counter and queues them
  on the advertiser.
* The advertiser drains its queue in FIFO order, one PDU at a time; relayed
  PDUs join the same queue as locally originated ones.  Advertising events
  fire on the node's cadence of advInterval plus a fresh random advDelay,
  and the head PDU holds the queue until its last event, so a deep relay
  backlog delays everything behind it.  A legacy advertising event
  transmits the same PDU on channels 37, 38 and 39 back to back; in
  extended mode an event instead sends three short indications on the
  primary channels that point at one auxiliary frame on a randomly chosen
  secondary channel.
* Receivers deduplicate on (src, seq) with a FIFO cache, hand matching
  destinations to the access layer, and relay a copy with ttl-1 when the
  relay rule allows and a relay buffer is free.
* Segmented unicast messages are block-acknowledged; the sender resends
  missing segments for a bounded number of rounds.  Application-level
  acknowledgments ride the same flooding path as unsegmented data.

Wire headers are folded into the PHY frame overhead, so PDU octet counts
equal payload octet counts (with small fixed sizes for control PDUs).
"""

import logging
from collections import OrderedDict, deque
from dataclasses import dataclass

from .engine import Engine, RandomSource
from .errors import ConfigError
from .radio import PHY_1M, PHY_2M, ChannelFrame, FrameKind, Medium, airtime_us
from .tuning import (
    EXT_AUX_OFFSET_US,
    EXT_INDICATION_OCTETS,
    AuxPointer,
    PowerControlConfig,
    RssiObserver,
    controlled_power_dbm,
)

log = logging.getLogger(__name__)

UNSEGMENTED_MAX_OCTETS = 11
SEGMENT_CAPACITY_OCTETS = 12
TRANSPORT_MAX_OCTETS = 380
EXT_UNSEGMENTED_MAX_OCTETS = 100   # aux frames carry larger PDUs unsegmented
EXT_SEGMENT_CAPACITY_OCTETS = 96
CACHE_CAPACITY = 128
MAX_TTL = 127
MAX_SEQ = 1 << 24
GROUP_ADV_EVENTS = 2               # fixed per-message budget in group mode
INTER_CHANNEL_GAP_US = 400
BLOCK_ACK_OCTETS = 7
APP_ACK_OCTETS = 4
REASSEMBLY_TIMEOUT_US = 200_000
TRANSPORT_RETRY_ROUNDS = 4
REASSEMBLY_IDLE_ROUNDS = 10        # partial buffers die after this many silent timeouts
# sender-side round cadence: the gap must cover a multi-hop block-ack round
# trip or every round fires spuriously and congestion feeds itself
SEG_ROUND_BASE_US = 400_000
SEG_ROUND_PER_TTL_US = 50_000


@dataclass(frozen=True)
class MeshAddress:
    kind: str   # "unicast" | "group"
    value: int


def unicast(value: int) -> MeshAddress:
    return MeshAddress("unicast", value)


def group(value: int) -> MeshAddress:
    return MeshAddress("group", value)


class MeshPdu:
    """One network PDU.  seg is (index, count, tag) for segmented transport."""

    __slots__ = ("src", "dst", "seq", "ttl", "seg", "payload", "app_msg_id",
                 "kind", "ack_info")

    def __init__(self, src, dst, seq, ttl, payload, app_msg_id,
                 kind="data", seg=None, ack_info=None):
        if not 0 <= ttl <= MAX_TTL:
            raise ConfigError(f"ttl {ttl} outside 0..{MAX_TTL}")
        if not 0 <= seq < MAX_SEQ:
            raise ConfigError(f"sequence number {seq} outside 24-bit range")
        self.src = src
        self.dst = dst
        self.seq = seq
        self.ttl = ttl
        self.seg = seg
        self.payload = payload
        self.app_msg_id = app_msg_id
        self.kind = kind
        self.ack_info = ack_info

    @property
    def octets(self) -> int:
        if self.kind == "seg_ack":
            return BLOCK_ACK_OCTETS
        return max(1, len(self.payload))

    def relayed_copy(self) -> "MeshPdu":
        return MeshPdu(self.src, self.dst, self.seq, self.ttl - 1, self.payload,
                       self.app_msg_id, kind=self.kind, seg=self.seg,
                       ack_info=self.ack_info)


def segment_payload(payload: bytes, *, extended: bool = False) -> list[bytes]:
    """Transport chunking: one unsegmented chunk when small, else fixed-size segments."""
    if len(payload) > TRANSPORT_MAX_OCTETS:
        raise ConfigError(
            f"payload of {len(payload)} octets exceeds transport maximum "
            f"{TRANSPORT_MAX_OCTETS}")
    limit = EXT_UNSEGMENTED_MAX_OCTETS if extended else UNSEGMENTED_MAX_OCTETS
    cap = EXT_SEGMENT_CAPACITY_OCTETS if extended else SEGMENT_CAPACITY_OCTETS
    if len(payload) <= limit:
        return [payload]
    return [payload[i:i + cap] for i in range(0, len(payload), cap)]


class NetworkCache:
    """FIFO set of recently seen (src, seq): the duplicate and loop filter."""

    __slots__ = ("capacity", "_entries")

    def __init__(self, capacity: int = CACHE_CAPACITY):
        if capacity < 1:
            raise ConfigError(f"cache capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._entries = OrderedDict()

    def seen(self, key) -> bool:
        return key in self._entries

    def insert(self, key) -> None:
        if key in self._entries:
            return
        self._entries[key] = None
        if len(self._entries) > self.capacity:
            self._entries.popitem(last=False)

    def __len__(self) -> int:
        return len(self._entries)


def scanner_channel_at(scan_interval_us: int, scan_window_us: int, t_us: int):
    """Channel the scanner is tuned to at time t, or None when idle."""
    if t_us % scan_interval_us >= scan_window_us:
        return None
    return 37 + (t_us // scan_interval_us) % 3


@dataclass
class NodeParams:
    relay_enabled: bool = True
    tx_power_dbm: float = 0.0
    n_adv_events_source: int = 3
    n_adv_events_relay: int = 2
    relay_buffer_cap: int = 5       # relay PDUs held at once; excess is dropped
    adv_interval_us: int = 20_000
    adv_delay_max_us: int = 10_000
    scan_interval_us: int = 2_000_000
    scan_window_us: int = 2_000_000
    retry_interval_us: int = 200_000
    retry_cap: int = 0              # 0 = retry until acknowledged (or guard)
    default_ttl: int = 7
    guard_us: int = 60_000_000
    extended: bool = False
    power_control: PowerControlConfig | None = None


class _AdvJob:
    __slots__ = ("pdu", "events_left", "event_start", "ready", "relayed")

    def __init__(self, pdu, events_left, ready, relayed):
        self.pdu = pdu
        self.events_left = events_left
        self.event_start = 0
        self.ready = ready
        self.relayed = relayed


class _Publication:
    __slots__ = ("app_msg_id", "dst", "payload", "mode", "send_time",
                 "acked", "retries", "retry_timer", "active_tag", "flagged",
                 "outstanding")

    def __init__(self, app_msg_id, dst, payload, mode, send_time):
        self.app_msg_id = app_msg_id
        self.dst = dst
        self.payload = payload
        self.mode = mode
        self.send_time = send_time
        self.acked = False
        self.retries = 0
        self.retry_timer = None
        self.active_tag = None
        self.flagged = False
        self.outstanding = 0   # unsegmented copies queued but not fully aired


class _TxAttempt:
    __slots__ = ("chunks", "dst", "acked", "rounds", "timer", "app_msg_id",
                 "done", "outstanding")

    def __init__(self, chunks, dst, app_msg_id):
        self.chunks = chunks
        self.dst = dst
        self.acked = set()
        self.rounds = 0
        self.timer = None
        self.app_msg_id = app_msg_id
        self.done = False
        self.outstanding = 0   # chunk jobs of the current round still queued


class _RxBuf:
    __slots__ = ("count", "got", "timer", "idle", "kind", "app_msg_id", "dst")

    def __init__(self, count, kind, app_msg_id, dst):
        self.count = count
        self.got = {}
        self.timer = None
        self.idle = 0
        self.kind = kind
        self.app_msg_id = app_msg_id
        self.dst = dst


class Node:
    """One mesh node bound to the shared engine and radio medium."""

    def __init__(self, node_id, address: int, params: NodeParams, engine: Engine,
                 medium: Medium, proto_rng: RandomSource, chan_rng: RandomSource,
                 collector, directory: dict, groups: dict):
        self.node_id = node_id
        self.address = address
        self.params = params
        self.engine = engine
        self.medium = medium
        self.rng = proto_rng
        self.collector = collector
        self.directory = directory       # unicast address value -> node id
        self.groups = groups             # group address value -> tuple of node ids
        self.subscriptions: set[int] = set()
        self._cache = NetworkCache()
        self._seq = 0
        self._tag = 0
        # single FIFO of pending (pdu, events_left); relayed PDUs queue behind
        # whatever is already waiting.  _next_slot enforces the advertising
        # cadence: at most one event per advInterval+advDelay, however deep
        # the backlog
        self._adv_queue: deque = deque()
        self._in_service = False
        self._next_slot = 0
        self._relay_backlog = 0
        self.relay_drops = 0
        self._round_timeout_us = (SEG_ROUND_BASE_US
                                  + SEG_ROUND_PER_TTL_US * params.default_ttl)
        self._pubs: dict = {}
        self._tx_attempts: dict = {}
        self._rx_bufs: dict = {}
        self._rx_done: set = set()
        self.observer = RssiObserver(params.power_control.window) \
            if params.power_control else None
        medium.register(
            node_id, params.scan_interval_us, params.scan_window_us, chan_rng,
            self._on_frame, self._on_rssi if self.observer else None)

    # ------------------------------------------------------------------ access
    def publish(self, dst: MeshAddress, payload: bytes, mode: str, app_msg_id: int) -> int:
        """Originate one application message; returns its correlation id."""
        if mode not in ("unicast", "group"):
            raise ConfigError(f"unknown publish mode {mode!r}")
        if mode == "unicast":
            if dst.kind != "unicast" or dst.value not in self.directory:
                raise ConfigError(f"unknown unicast destination {dst}")
            destinations = (self.directory[dst.value],)
        else:
            if dst.kind != "group" or dst.value not in self.groups:
                raise ConfigError(f"unknown group destination {dst}")
            destinations = tuple(self.groups[dst.value])
        if len(payload) > TRANSPORT_MAX_OCTETS:
            raise ConfigError(
                f"payload of {len(payload)} octets exceeds transport maximum "
                f"{TRANSPORT_MAX_OCTETS}")
        now = self.engine.now
        self.collector.on_send(app_msg_id, self.node_id, destinations, now, len(payload))
        pub = _Publication(app_msg_id, dst, payload, mode, now)
        self._pubs[app_msg_id] = pub
        self._send_copy(pub)
        if mode == "unicast":
            pub.retry_timer = self.engine.schedule_after(
                self.params.retry_interval_us, self._retry_fire, pub)
        return app_msg_id

    def _send_copy(self, pub: _Publication) -> None:
        limit = EXT_UNSEGMENTED_MAX_OCTETS if self.params.extended \
            else UNSEGMENTED_MAX_OCTETS
        events = GROUP_ADV_EVENTS if pub.mode == "group" \
            else self.params.n_adv_events_source
        if len(pub.payload) <= limit:
            pub.outstanding += 1
            self._enqueue(self._make_pdu(pub.dst, pub.payload, pub.app_msg_id), events)
            pub.active_tag = None
            return
        chunks = segment_payload(pub.payload, extended=self.params.extended)
        tag = self._tag
        self._tag += 1
        if pub.dst.kind == "unicast":
            attempt = _TxAttempt(chunks, pub.dst, pub.app_msg_id)
            self._tx_attempts[tag] = attempt
            pub.active_tag = tag
            # round timer is armed once the train has left the advertiser
            attempt.outstanding = len(chunks) * events
        self._enqueue_segments(
            [self._make_pdu(pub.dst, chunk, pub.app_msg_id,
                            seg=(i, len(chunks), tag))
             for i, chunk in enumerate(chunks)], events)

    def _retry_fire(self, pub: _Publication) -> None:
        if pub.acked or pub.flagged:
            return
        now = self.engine.now
        if now - pub.send_time >= self.params.guard_us:
            pub.flagged = True
            self.collector.flag_guard(pub.app_msg_id)
            return
        if self.params.retry_cap and pub.retries >= self.params.retry_cap:
            return
        attempt = self._tx_attempts.get(pub.active_tag) if pub.active_tag is not None else None
        if (attempt is not None and not attempt.done) or pub.outstanding > 0:
            # let the queued copy air before republishing; stacking copies in
            # a congested advertiser only feeds the backlog
            pub.retry_timer = self.engine.schedule_after(
                self.params.retry_interval_us, self._retry_fire, pub)
            return
        pub.retries += 1
        self.collector.on_retransmission(pub.app_msg_id)
        self._send_copy(pub)
        pub.retry_timer = self.engine.schedule_after(
            self.params.retry_interval_us, self._retry_fire, pub)

    def _access_deliver(self, src_value: int, kind: str, payload: bytes,
                        app_msg_id: int) -> None:
        if kind == "data":
            self.collector.on_delivery(app_msg_id, self.node_id, self.engine.now)
            if src_value != self.address:
                ack = self._make_pdu(unicast(src_value), bytes(APP_ACK_OCTETS),
                                     app_msg_id, kind="app_ack")
                self._enqueue(ack, self.params.n_adv_events_source)
        elif kind == "app_ack":
            self.collector.on_ack(app_msg_id, src_value, self.engine.now)
            pub = self._pubs.get(app_msg_id)
            if pub is not None and not pub.acked and pub.mode == "unicast":
                pub.acked = True
                if pub.retry_timer is not None:
                    Engine.cancel(pub.retry_timer)

    # ----------------------------------------------------------------- network
    def _make_pdu(self, dst, payload, app_msg_id, kind="data", seg=None,
                  ack_info=None) -> MeshPdu:
        seq = self._seq
        self._seq += 1
        return MeshPdu(self.address, dst, seq, self.params.default_ttl, payload,
                       app_msg_id, kind=kind, seg=seg, ack_info=ack_info)

    def receive_network_pdu(self, pdu: MeshPdu) -> None:
        key = (pdu.src, pdu.seq)
        if self._cache.seen(key):
            return
        self._cache.insert(key)
        dst = pdu.dst
        if (dst.value == self.address if dst.kind == "unicast"
                else dst.value in self.subscriptions):
            self._transport_receive(pdu)
        if (self.params.relay_enabled and pdu.ttl >= 2
                and pdu.src != self.address):
            self._enqueue(pdu.relayed_copy(), self.params.n_adv_events_relay,
                          relayed=True)

    # --------------------------------------------------------------- transport
    def _transport_receive(self, pdu: MeshPdu) -> None:
        if pdu.kind == "seg_ack":
            self._on_block_ack(pdu)
        elif pdu.seg is None:
            self._access_deliver(pdu.src, pdu.kind, pdu.payload, pdu.app_msg_id)
        else:
            self._reassemble(pdu)

    def _reassemble(self, pdu: MeshPdu) -> None:
        idx, count, tag = pdu.seg
        key = (pdu.src, tag)
        if key in self._rx_done:
            if pdu.dst.kind == "unicast":
                self._send_block_ack(pdu.src, tag, range(count), pdu.app_msg_id)
            return
        buf = self._rx_bufs.get(key)
        if buf is None:
            buf = _RxBuf(count, pdu.kind, pdu.app_msg_id, pdu.dst)
            self._rx_bufs[key] = buf
            buf.timer = self.engine.schedule_after(
                REASSEMBLY_TIMEOUT_US, self._reassembly_timeout, key)
        if buf.count != count:
            log.warning("%s: conflicting segment count for %s: %d vs %d",
                        self.node_id, key, buf.count, count)
            return
        if idx in buf.got:
            return
        buf.got[idx] = pdu.payload
        buf.idle = 0
        if len(buf.got) == buf.count:
            if buf.timer is not None:
                Engine.cancel(buf.timer)
            del self._rx_bufs[key]
            self._rx_done.add(key)
            payload = b"".join(buf.got[i] for i in range(count))
            if pdu.dst.kind == "unicast":
                self._send_block_ack(pdu.src, tag, range(count), pdu.app_msg_id)
            self._access_deliver(pdu.src, buf.kind, payload, buf.app_msg_id)
        elif idx == count - 1 and pdu.dst.kind == "unicast":
            # the train has passed with gaps; report them without waiting
            # for the timer
            self._send_block_ack(pdu.src, tag, buf.got.keys(), pdu.app_msg_id)

    def _reassembly_timeout(self, key) -> None:
        buf = self._rx_bufs.get(key)
        if buf is None:
            return
        buf.idle += 1
        if buf.idle >= REASSEMBLY_IDLE_ROUNDS:
            del self._rx_bufs[key]
            return
        if buf.dst.kind == "unicast":
            src, tag = key
            self._send_block_ack(src, tag, buf.got.keys(), buf.app_msg_id)
        buf.timer = self.engine.schedule_after(
            REASSEMBLY_TIMEOUT_US, self._reassembly_timeout, key)

    def _send_block_ack(self, dst_value, tag, received, app_msg_id) -> None:
        pdu = self._make_pdu(unicast(dst_value), b"", app_msg_id, kind="seg_ack",
                             ack_info=(tag, frozenset(received)))
        self._enqueue(pdu, self.params.n_adv_events_source)

    def _on_block_ack(self, pdu: MeshPdu) -> None:
        tag, received = pdu.ack_info
        attempt = self._tx_attempts.get(tag)
        if attempt is None or attempt.done:
            return
        attempt.acked |= received
        if len(attempt.acked) == len(attempt.chunks):
            attempt.done = True
            if attempt.timer is not None:
                Engine.cancel(attempt.timer)
            return
        if attempt.outstanding == 0:
            # a partial ack while the round is still queued must not spawn
            # another round on top of copies that have not aired yet
            self._transport_round(tag, attempt)

    def _transport_timer(self, tag) -> None:
        attempt = self._tx_attempts.get(tag)
        if attempt is None or attempt.done:
            return
        self._transport_round(tag, attempt)

    def _transport_round(self, tag, attempt: _TxAttempt) -> None:
        if attempt.timer is not None:
            Engine.cancel(attempt.timer)
            attempt.timer = None
        if attempt.rounds >= TRANSPORT_RETRY_ROUNDS:
            attempt.done = True
            log.debug("%s: transport attempt %d abandoned", self.node_id, tag)
            return
        attempt.rounds += 1
        self.collector.on_retransmission(attempt.app_msg_id)
        count = len(attempt.chunks)
        events = self.params.n_adv_events_source
        missing = [self._make_pdu(attempt.dst, chunk, attempt.app_msg_id,
                                  seg=(i, count, tag))
                   for i, chunk in enumerate(attempt.chunks)
                   if i not in attempt.acked]
        attempt.outstanding = len(missing) * events
        self._enqueue_segments(missing, events)

    # --------------------------------------------------------------- advertiser
    def _enqueue(self, pdu: MeshPdu, n_events: int, relayed: bool = False) -> None:
        ready = self.engine.now
        if relayed:
            # relay copies come from a finite buffer pool; when it is
            # exhausted the copy is shed and neighbours with room cover.
            # without the cap a loaded mesh accumulates backlog without bound
            if self._relay_backlog >= self.params.relay_buffer_cap:
                self.relay_drops += 1
                return
            self._relay_backlog += 1
            # every neighbour that caught the same frame would otherwise hand
            # its copy to an idle advertiser at the same instant; the draw
            # models receive-to-advertise processing spread
            ready += int(self.rng.draw_uniform(0, self.params.adv_delay_max_us))
        self._adv_queue.append(_AdvJob(pdu, n_events, ready, relayed))
        self._maybe_schedule()

    def _enqueue_segments(self, pdus: list, n_cycles: int) -> None:
        """Air a segment train as repeated whole-message cycles.

        The transport layer retransmits the message, not each segment, so the
        wire order is s0,s1,...,s0,s1,... with one advertising event per
        segment per cycle.  Receivers that caught a segment in an earlier
        cycle drop the repeat through the network cache.
        """
        now = self.engine.now
        for _ in range(n_cycles):
            for pdu in pdus:
                self._adv_queue.append(_AdvJob(pdu, 1, now, False))
        self._maybe_schedule()

    def _maybe_schedule(self) -> None:
        if self._in_service or not self._adv_queue:
            return
        due = max(self.engine.now, self._next_slot, self._adv_queue[0].ready)
        self._in_service = True
        self.engine.schedule(due, self._event_fire)

    def _event_fire(self) -> None:
        job = self._adv_queue[0]
        job.event_start = self.engine.now
        self._next_slot = (self.engine.now + self.params.adv_interval_us
                           + int(self.rng.draw_uniform(0, self.params.adv_delay_max_us)))
        self._start_event(job)

    def _event_power(self) -> float:
        if self.observer is not None:
            return controlled_power_dbm(self.params.power_control, self.observer)
        return self.params.tx_power_dbm

    def _start_event(self, job: _AdvJob) -> None:
        job.event_start = self.engine.now
        power = self._event_power()
        if self.params.extended:
            self._ext_event(job, power)
        else:
            self._legacy_frame(job, 0, power)

    def _legacy_frame(self, job: _AdvJob, ch_idx: int, power: float) -> None:
        pdu = job.pdu
        frame = ChannelFrame(self.node_id, 37 + ch_idx, PHY_1M, power,
                             self.engine.now, pdu.octets, FrameKind.ADV, payload=pdu)
        self.medium.begin_transmission(frame)
        self.collector.on_frame(pdu.app_msg_id, power)
        nxt = frame.end + INTER_CHANNEL_GAP_US
        if ch_idx < 2:
            self.engine.schedule(nxt, self._legacy_frame, job, ch_idx + 1, power)
        else:
            self.engine.schedule(nxt, self._finish_event, job)

    def _ext_event(self, job: _AdvJob, power: float) -> None:
        now = self.engine.now
        ind_air = airtime_us(EXT_INDICATION_OCTETS, PHY_1M)
        step = ind_air + INTER_CHANNEL_GAP_US
        aux_start = now + 2 * step + ind_air + EXT_AUX_OFFSET_US
        pointer = AuxPointer(self.rng.randrange(37), aux_start)
        for i in range(3):
            self.engine.schedule(now + i * step, self._tx_indication,
                                 job, pointer, 37 + i, power)
        self.engine.schedule(aux_start, self._tx_aux, job, pointer, power)
        aux_end = aux_start + airtime_us(job.pdu.octets, PHY_2M)
        self.engine.schedule(aux_end + INTER_CHANNEL_GAP_US, self._finish_event, job)

    def _tx_indication(self, job, pointer, channel, power) -> None:
        frame = ChannelFrame(self.node_id, channel, PHY_1M, power, self.engine.now,
                             EXT_INDICATION_OCTETS, FrameKind.EXT_IND, payload=pointer)
        self.medium.begin_transmission(frame)
        self.collector.on_frame(job.pdu.app_msg_id, power)

    def _tx_aux(self, job, pointer, power) -> None:
        pdu = job.pdu
        frame = ChannelFrame(self.node_id, pointer.channel, PHY_2M, power,
                             self.engine.now, pdu.octets, FrameKind.AUX,
                             payload=pdu, eligible=pointer.eligible)
        self.medium.begin_transmission(frame)
        self.collector.on_frame(pdu.app_msg_id, power)

    def _finish_event(self, job: _AdvJob) -> None:
        job.events_left -= 1
        if job.events_left == 0:
            self._adv_queue.popleft()
            if job.relayed:
                self._relay_backlog -= 1
            pdu = job.pdu
            if pdu.kind == "data" and pdu.src == self.address and not job.relayed:
                if pdu.seg is not None:
                    attempt = self._tx_attempts.get(pdu.seg[2])
                    if attempt is not None and not attempt.done:
                        attempt.outstanding -= 1
                        if attempt.outstanding == 0:
                            attempt.timer = self.engine.schedule_after(
                                self._round_timeout_us, self._transport_timer,
                                pdu.seg[2])
                else:
                    pub = self._pubs.get(pdu.app_msg_id)
                    if pub is not None:
                        pub.outstanding -= 1
        self._in_service = False
        self._maybe_schedule()

    # ------------------------------------------------------------------- radio
    def _on_frame(self, frame: ChannelFrame, rssi: float) -> None:
        if frame.kind is FrameKind.EXT_IND:
            frame.payload.eligible.add(self.node_id)
            return
        self.receive_network_pdu(frame.payload)

    def _on_rssi(self, channel: int, rssi: float) -> None:
        self.observer.observe(channel, rssi)
