"""Radio medium tests, including a brute-force reception oracle."""

import itertools
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meshsim.engine import Engine, RandomSource
from meshsim.errors import ConfigError
from meshsim.radio import (
    PHY_1M,
    PHY_2M,
    ChannelFrame,
    FrameKind,
    LinkModel,
    Medium,
    Outcome,
    airtime_us,
    path_loss_db,
    received_power_dbm,
)

CONTINUOUS = 10**9  # scan interval long enough that t stays in the first window


def make_medium(losses, sigma=0.0, capture=10.0, scan_interval=CONTINUOUS, scan_window=None):
    eng = Engine()
    link = LinkModel(losses, shadowing_sigma_db=sigma, capture_db=capture)
    med = Medium(eng, link)
    nodes = sorted({n for pair in losses for n in pair})
    delivered = []
    root = RandomSource(99)
    for n in nodes:
        med.register(
            n, scan_interval, scan_window if scan_window is not None else scan_interval,
            root.stream(f"chan:{n}"),
            lambda frame, rssi, n=n: delivered.append((n, frame, rssi)),
        )
    med.finalize(0.0)
    return eng, med, delivered


def test_airtime_examples():
    assert airtime_us(39, PHY_1M) == 392
    assert airtime_us(39, PHY_2M) == 200
    assert airtime_us(1, PHY_1M) == 88
    with pytest.raises(ConfigError):
        airtime_us(0, PHY_1M)


@settings(max_examples=100, deadline=None)
@given(st.integers(min_value=1, max_value=379))
def test_airtime_monotonic_in_octets(n):
    assert airtime_us(n + 1, PHY_1M) > airtime_us(n, PHY_1M)
    assert airtime_us(n + 1, PHY_2M) > airtime_us(n, PHY_2M)


def test_path_loss_reference_points():
    assert path_loss_db(1.0) == pytest.approx(40.0)
    assert path_loss_db(10.0) == pytest.approx(67.0)
    with pytest.raises(ConfigError):
        path_loss_db(0.0)


def test_received_power_is_plain_db_arithmetic():
    assert received_power_dbm(0.0, 67.0, 3.0) == pytest.approx(-64.0)


def test_frame_channel_kind_validation():
    with pytest.raises(ConfigError):
        ChannelFrame("a", 15, PHY_1M, 0.0, 0, 11, kind=FrameKind.ADV)
    with pytest.raises(ConfigError):
        ChannelFrame("a", 37, PHY_2M, 0.0, 0, 11, kind=FrameKind.AUX)
    f = ChannelFrame("a", 37, PHY_1M, 0.0, 100, 11)
    assert f.end - f.start == airtime_us(11, PHY_1M)


def test_asymmetric_matrix_rejected():
    with pytest.raises(ConfigError):
        LinkModel({("a", "b"): 60.0, ("b", "a"): 61.0})


def test_capture_threshold_must_be_positive():
    with pytest.raises(ConfigError):
        LinkModel({("a", "b"): 60.0}, capture_db=0.0)


def test_lone_frame_delivered_to_scanning_neighbors():
    eng, med, delivered = make_medium({("a", "b"): 60.0, ("a", "c"): 60.0, ("b", "c"): 60.0})
    f = ChannelFrame("a", 37, PHY_1M, 0.0, 0, 11)
    med.begin_transmission(f)
    eng.run_until_idle()
    assert sorted(n for n, _, _ in delivered) == ["b", "c"]
    assert all(rssi == -60.0 for _, _, rssi in delivered)


def test_sensitivity_boundary_inclusive():
    eng, med, delivered = make_medium({("a", "b"): 90.0})
    med.begin_transmission(ChannelFrame("a", 37, PHY_1M, 0.0, 0, 11))
    eng.run_until_idle()
    assert [n for n, _, _ in delivered] == ["b"]  # rssi == -90 == sensitivity


def test_below_sensitivity_lost():
    eng, med, delivered = make_medium({("a", "b"): 90.5})
    med.begin_transmission(ChannelFrame("a", 37, PHY_1M, 0.0, 0, 11))
    eng.run_until_idle()
    assert delivered == []


def test_capture_lets_much_stronger_frame_through():
    losses = {("a", "r"): 60.0, ("b", "r"): 95.0, ("a", "b"): 70.0}
    eng, med, delivered = make_medium(losses)
    med.begin_transmission(ChannelFrame("a", 37, PHY_1M, 0.0, 0, 11))
    med.begin_transmission(ChannelFrame("b", 37, PHY_1M, 0.0, 50, 11))
    eng.run_until_idle()
    assert ("r", delivered[0][1], -60.0) in delivered or any(n == "r" for n, _, _ in delivered)
    got = {(n, f.transmitter) for n, f, _ in delivered}
    assert ("r", "a") in got          # 35 dB over the interferer: captured
    assert ("r", "b") not in got      # collided at r (and a was transmitting)


def test_near_equal_overlap_loses_both():
    losses = {("a", "r"): 60.0, ("b", "r"): 65.0, ("a", "b"): 70.0}
    eng, med, delivered = make_medium(losses)
    med.begin_transmission(ChannelFrame("a", 37, PHY_1M, 0.0, 0, 11))
    med.begin_transmission(ChannelFrame("b", 37, PHY_1M, 0.0, 50, 11))
    eng.run_until_idle()
    assert not any(n == "r" for n, _, _ in delivered)
    assert med.outcome_counts[Outcome.COLLISION] >= 2


def test_receiver_transmitting_misses_frame():
    losses = {("a", "b"): 60.0}
    eng, med, delivered = make_medium(losses)
    med.begin_transmission(ChannelFrame("a", 37, PHY_1M, 0.0, 0, 11))
    med.begin_transmission(ChannelFrame("b", 38, PHY_1M, 0.0, 50, 11))
    eng.run_until_idle()
    # different channels, so no collision; but each was transmitting during the other
    assert delivered == []
    assert med.outcome_counts[Outcome.NOT_LISTENING] == 2


def test_half_duplex_transmit_overlap_asserts():
    eng, med, _ = make_medium({("a", "b"): 60.0})
    med.begin_transmission(ChannelFrame("a", 37, PHY_1M, 0.0, 0, 11))
    with pytest.raises(AssertionError):
        med.begin_transmission(ChannelFrame("a", 38, PHY_1M, 0.0, 50, 11))


def test_scanner_channel_rotates_per_interval():
    # scan interval 1000 µs, window 1000 µs: second interval listens on 38
    eng, med, delivered = make_medium({("a", "b"): 60.0}, scan_interval=1000)
    med.begin_transmission(ChannelFrame("a", 38, PHY_1M, 0.0, 1200, 11))
    med.begin_transmission(ChannelFrame("a", 37, PHY_1M, 0.0, 1600, 11))
    eng.run_until_idle()
    got = {f.channel for _, f, _ in delivered}
    assert got == {38}


def test_frame_straddling_interval_boundary_lost():
    eng, med, delivered = make_medium({("a", "b"): 60.0}, scan_interval=1000)
    med.begin_transmission(ChannelFrame("a", 37, PHY_1M, 0.0, 900, 11))  # ends at 1068
    eng.run_until_idle()
    assert delivered == []


def test_duty_cycled_window_idles_late_in_interval():
    eng, med, delivered = make_medium(
        {("a", "b"): 60.0}, scan_interval=10_000, scan_window=2_000)
    med.begin_transmission(ChannelFrame("a", 37, PHY_1M, 0.0, 500, 11))
    med.begin_transmission(ChannelFrame("a", 37, PHY_1M, 0.0, 5_000, 11))
    eng.run_until_idle()
    starts = sorted(f.start for _, f, _ in delivered)
    assert starts == [500]


def test_noise_frame_interferes_but_never_delivers():
    eng, med, delivered = make_medium({("a", "b"): 60.0})
    noise = ChannelFrame("ext", 37, PHY_1M, -55.0, 0, 39, kind=FrameKind.NOISE)
    med.begin_transmission(noise)
    med.begin_transmission(ChannelFrame("a", 37, PHY_1M, 0.0, 50, 11))
    eng.run_until_idle()
    assert delivered == []  # -60 vs -55 noise: capture fails


def test_blackout_window_forces_loss():
    eng, med, delivered = make_medium({("a", "b"): 60.0})
    med.add_blackout(0, 1_000_000)
    med.begin_transmission(ChannelFrame("a", 37, PHY_1M, 0.0, 0, 11))
    eng.run_until_idle()
    assert delivered == []


def test_shadowing_draws_are_per_frame_and_reproducible():
    losses = {("a", "b"): 80.0}
    outs = []
    for _ in range(2):
        eng, med, delivered = make_medium(losses, sigma=4.0)
        for i in range(20):
            med.begin_transmission(ChannelFrame("a", 37, PHY_1M, 0.0, i * 1000, 11))
        eng.run_until_idle()
        outs.append([round(r, 6) for _, _, r in delivered])
    assert outs[0] == outs[1]
    assert len(set(outs[0])) > 1  # redrawn per frame


# --------------------------------------------------------------------------
# Brute-force oracle: an independent spelling of the reception rules,
# checked against resolve_reception over enumerated micro-instances.
# --------------------------------------------------------------------------

SENS = -90.0
CAPTURE = 10.0


def oracle(nodes, frames, loss):
    """frames: list of (tx, channel, power, start, octets); returns {(rx,i): Outcome}."""
    spans = []
    for tx, ch, p, s, n in frames:
        spans.append((s, s + (10 + n) * 8))  # 1M airtime by hand
    out = {}
    for i, (tx, ch, p, s, n) in enumerate(frames):
        s0, e0 = spans[i]
        for rx in nodes:
            if rx == tx:
                continue
            # continuous scanning in the first interval: channel 37 only
            if ch != 37:
                out[(rx, i)] = Outcome.NOT_LISTENING
                continue
            busy = any(
                frames[j][0] == rx and spans[j][0] < e0 and s0 < spans[j][1]
                for j in range(len(frames))
            )
            if busy:
                out[(rx, i)] = Outcome.NOT_LISTENING
                continue
            rssi = p - loss[frozenset((tx, rx))]
            if rssi < SENS:
                out[(rx, i)] = Outcome.BELOW_SENSITIVITY
                continue
            collided = False
            for j, (tx2, ch2, p2, s2, n2) in enumerate(frames):
                if j == i or ch2 != ch:
                    continue
                if spans[j][0] < e0 and s0 < spans[j][1]:
                    if rssi - (p2 - loss[frozenset((tx2, rx))]) < CAPTURE:
                        collided = True
                        break
            out[(rx, i)] = Outcome.COLLISION if collided else Outcome.DELIVERED
    return out


def run_impl(nodes, frames, loss):
    pair_loss = {}
    for key, v in loss.items():
        a, b = sorted(key)
        pair_loss[(a, b)] = v
    eng = Engine()
    link = LinkModel(pair_loss, shadowing_sigma_db=0.0, capture_db=CAPTURE)
    med = Medium(eng, link)
    root = RandomSource(5)
    for nd in nodes:
        med.register(nd, CONTINUOUS, CONTINUOUS, root.stream(nd), lambda f, r: None)
    med.finalize(0.0)
    objs = []
    for tx, ch, p, s, n in sorted(frames, key=lambda f: f[3]):
        objs.append((frames.index((tx, ch, p, s, n)), ChannelFrame(tx, ch, PHY_1M, p, s, n)))
    for _, fr in objs:
        eng.schedule(fr.start, med.begin_transmission, fr)
    eng.run_until_idle()
    got = {}
    for i, fr in objs:
        for rx in nodes:
            if rx == fr.transmitter:
                continue
            outcome, _ = med.resolve_reception(rx, fr)
            got[(rx, i)] = outcome
    return got


def test_reception_oracle_two_frames():
    nodes = ("a", "b", "c")
    loss_values = (60.0, 72.0, 95.0)
    checked = 0
    for la, lb, lc in itertools.product(loss_values, repeat=3):
        loss = {
            frozenset(("a", "b")): la,
            frozenset(("a", "c")): lb,
            frozenset(("b", "c")): lc,
        }
        for tx2 in ("b", "c"):
            for s2 in range(0, 1000, 100):
                for p1, p2 in itertools.product((0.0, -9.0), repeat=2):
                    frames = [("a", 37, p1, 0, 11), (tx2, 37, p2, s2, 11)]
                    assert run_impl(nodes, frames, loss) == oracle(nodes, frames, loss)
                    checked += 1
    assert checked == 27 * 2 * 10 * 4


def test_reception_oracle_three_frames():
    nodes = ("a", "b", "c")
    loss_values = (60.0, 72.0, 95.0)
    for la, lb, lc in itertools.product(loss_values, repeat=3):
        loss = {
            frozenset(("a", "b")): la,
            frozenset(("a", "c")): lb,
            frozenset(("b", "c")): lc,
        }
        for s2, s3 in itertools.product((0, 150, 300, 600), repeat=2):
            frames = [
                ("a", 37, 0.0, 0, 11),
                ("b", 37, -9.0, s2, 11),
                ("c", 37, 0.0, s3, 11),
            ]
            assert run_impl(nodes, frames, loss) == oracle(nodes, frames, loss)
