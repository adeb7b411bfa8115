"""Experiment orchestration: assemble a world from documents and run it.

One call to run_experiment builds the full node set for a topology, expands
the scenario's traffic schedule, runs the kernel until every retry, guard,
and reassembly timer has drained, and returns the per-message records.
Multi-seed runs fan out over a process pool; results carry everything the
exporters and the bootstrap comparison need.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from .engine import Engine, RandomSource
from .errors import ConfigError
from .metrics import Collector, CompareResult, MessageRecord, compare
from .radio import (
    PHY_1M,
    PRIMARY_CHANNELS,
    ChannelFrame,
    FrameKind,
    LinkModel,
    Medium,
)
from .scenario import GROUP_ADDRESS, ScenarioConfig, build_traffic
from .stack import Node, NodeParams, group, unicast
from .topology import Topology, flood_reaches_all
from .tuning import PowerControlConfig, select_relays

# hard stop against non-terminating schedules; generous next to the ~1M
# events of the largest bundled run
MAX_EVENTS_PER_RUN = 50_000_000

ENV_TRANSMITTER = "env"
NOISE_BURST_OCTETS = 30


@dataclass(frozen=True)
class RunResult:
    config: ScenarioConfig
    seed: int
    relays: tuple[str, ...]
    records: tuple[MessageRecord, ...]
    frames_sent: int
    relay_drops: int
    mean_tx_power_dbm: float | None
    events_dispatched: int


def node_params(cfg: ScenarioConfig, relay_enabled: bool) -> NodeParams:
    pc = None
    if cfg.power_control:
        pc = PowerControlConfig(
            p_max_dbm=cfg.tx_power_dbm,
            zeta_th_dbm=cfg.power_control_zeta_th_dbm,
            margin_db=cfg.power_control_margin_db,
            floor_dbm=cfg.power_control_floor_dbm,
            window=cfg.power_control_window)
    return NodeParams(
        relay_enabled=relay_enabled,
        tx_power_dbm=cfg.tx_power_dbm,
        n_adv_events_source=cfg.n_adv_events_source,
        n_adv_events_relay=cfg.n_adv_events_relay,
        relay_buffer_cap=cfg.relay_buffer_cap,
        adv_interval_us=round(cfg.adv_interval_ms * 1000),
        adv_delay_max_us=round(cfg.adv_delay_max_ms * 1000),
        scan_interval_us=round(cfg.scan_interval_ms * 1000),
        scan_window_us=round(cfg.scan_window_resolved_ms * 1000),
        retry_interval_us=round(cfg.retry_interval_ms * 1000),
        retry_cap=cfg.retry_cap,
        default_ttl=cfg.default_ttl,
        guard_us=round(cfg.guard_s * 1_000_000),
        extended=cfg.extended,
        power_control=pc)


def choose_relays(topology: Topology, cfg: ScenarioConfig,
                  rng: RandomSource) -> frozenset[str]:
    """Relay subset for the run; partial subsets must still flood everywhere."""
    if cfg.relay_fraction >= 1.0:
        return frozenset(topology.node_ids)
    return frozenset(select_relays(
        topology.node_ids, cfg.relay_fraction, rng,
        acceptable=lambda chosen: flood_reaches_all(
            topology, set(chosen), cfg.tx_power_dbm)))


def _emit_noise(medium: Medium, channel: int, power_dbm: float, start: int) -> None:
    medium.begin_transmission(ChannelFrame(
        ENV_TRANSMITTER, channel, PHY_1M, power_dbm, start,
        NOISE_BURST_OCTETS, FrameKind.NOISE))


def _schedule_interference(engine: Engine, medium: Medium, cfg: ScenarioConfig,
                           rng: RandomSource, horizon_us: int) -> None:
    t = 0.0
    while True:
        u = rng.draw_uniform(0.0, 1.0)
        t += -math.log(max(1e-12, 1.0 - u)) * 1e6 / cfg.interference_rate_per_s
        if t >= horizon_us:
            return
        channel = PRIMARY_CHANNELS[min(2, int(rng.draw_uniform(0, 3)))]
        start = round(t)
        engine.schedule(start, _emit_noise, medium, channel,
                        cfg.interference_power_dbm, start)


def run_experiment(topology: Topology, cfg: ScenarioConfig, seed: int) -> RunResult:
    cfg.validate()
    root = RandomSource(seed)
    schedule = build_traffic(topology, cfg, root.stream("traffic"))
    relays = choose_relays(topology, cfg, root.stream("relays"))

    loss = topology.loss_map()
    if cfg.interference_rate_per_s > 0:
        for nid in topology.node_ids:
            loss[(ENV_TRANSMITTER, nid)] = 0.0

    engine = Engine()
    medium = Medium(engine, LinkModel(loss))
    addr = {nid: i + 1 for i, nid in enumerate(topology.node_ids)}
    directory = {v: nid for nid, v in addr.items()}
    groups = {GROUP_ADDRESS: tuple(cfg.slaves)} \
        if cfg.mode == "group-acked-fixed" else {}
    collector = Collector(directory)

    nodes: dict[str, Node] = {}
    for nid in topology.node_ids:
        nodes[nid] = Node(
            nid, addr[nid], node_params(cfg, nid in relays), engine, medium,
            root.stream(f"proto:{nid}"), root.stream(f"chan:{nid}"),
            collector, directory, groups)
    for s in groups.get(GROUP_ADDRESS, ()):
        nodes[s].subscriptions.add(GROUP_ADDRESS)
    medium.finalize(cfg.tx_power_dbm)

    payload = bytes(cfg.message_size_octets)
    stack_mode = "unicast" if cfg.mode == "unicast-acked" else "group"
    for s in schedule:
        dst = unicast(addr[s.dst_node]) if s.dst_node is not None \
            else group(s.group)
        engine.schedule(s.time_us, nodes[s.source].publish, dst, payload,
                        stack_mode, s.app_msg_id)
    if cfg.interference_rate_per_s > 0:
        horizon = schedule[-1].time_us + round(cfg.guard_s * 1e6)
        _schedule_interference(engine, medium, cfg,
                               root.stream("interference"), horizon)

    dispatched = engine.run_until_idle(MAX_EVENTS_PER_RUN)
    if dispatched >= MAX_EVENTS_PER_RUN:
        raise RuntimeError(
            f"run hit the {MAX_EVENTS_PER_RUN}-event cap; schedule not draining")
    return RunResult(cfg, seed, tuple(sorted(relays)),
                     tuple(collector.records()), collector.frames_sent,
                     sum(n.relay_drops for n in nodes.values()),
                     collector.mean_tx_power_dbm, dispatched)


def _run_one(args: tuple) -> RunResult:
    topology, cfg, seed = args
    return run_experiment(topology, cfg, seed)


def run_many(topology: Topology, cfg: ScenarioConfig, seeds,
             jobs: int | None = None) -> dict[int, RunResult]:
    """Run one seed per process; results keyed by seed, in seed order."""
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("no seeds given")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("duplicate seeds")
    if jobs is None:
        jobs = min(len(seeds), os.cpu_count() or 1)
    if jobs <= 1 or len(seeds) == 1:
        results = [run_experiment(topology, cfg, s) for s in seeds]
    else:
        work = [(topology, cfg, s) for s in seeds]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, work))
    return {r.seed: r for r in results}


def compare_runs(baseline: dict[int, RunResult], variant: dict[int, RunResult],
                 kind: str = "one-way") -> CompareResult:
    """Bootstrap comparison of two arms; arms must share a workload."""
    if not baseline or not variant:
        raise ConfigError("compare needs runs in both arms")
    sigs = []
    for arm in (baseline, variant):
        arm_sigs = {r.config.workload_signature() for r in arm.values()}
        if len(arm_sigs) != 1:
            raise ConfigError("runs within one arm use different workloads")
        sigs.append(arm_sigs.pop())
    if sigs[0] != sigs[1]:
        raise ConfigError(
            f"arms are not comparable: workload {sigs[0]} vs {sigs[1]}")
    return compare({s: r.records for s, r in baseline.items()},
                   {s: r.records for s, r in variant.items()}, kind)
