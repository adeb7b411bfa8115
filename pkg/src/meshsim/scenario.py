"""Scenario documents: run configuration and traffic-schedule generation.

Format (UTF-8, line oriented, ``#`` comments)::

    meshsim-scenario v1
    pattern many-to-many(3)
    message_size_octets 11
    ...

One key per line, value tokens separated by whitespace.  Absent keys take
the defaults below.  ``--set key=value`` assignments replace the file's
value for that key before validation.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass

from .engine import RandomSource
from .errors import ConfigError
from .topology import Topology

SCENARIO_HEADER = "meshsim-scenario v1"
GROUP_ADDRESS = 0xC000
MIN_PAIR_HOPS = 2
PAIR_DRAW_ATTEMPTS = 200

PATTERNS = ("one-to-many", "many-to-one", "many-to-many")
MODES = ("unicast-acked", "group-acked-fixed")
_MODE_ALIASES = {"unicast": "unicast-acked", "group": "group-acked-fixed"}
_MM_SUGAR = re.compile(r"^many-to-many\((\d+)\)$")


@dataclass(frozen=True)
class ScenarioConfig:
    pattern: str = "many-to-many"
    senders: int = 3
    mode: str = "unicast-acked"
    message_size_octets: int = 11
    iterations: int = 100
    period_ms: float = 1000.0
    jitter_ms: float = 0.0
    controller: str | None = None
    slaves: tuple[str, ...] = ()
    seed: int = 1
    adv_interval_ms: float = 20.0
    adv_delay_max_ms: float = 10.0
    scan_interval_ms: float = 2000.0
    scan_window_ms: float | None = None
    scan_turnaround_ms: float = 30.0
    tx_power_dbm: float = 0.0
    n_adv_events_source: int = 3
    n_adv_events_relay: int = 2
    relay_buffer_cap: int = 5
    retry_interval_ms: float = 200.0
    retry_cap: int = 0
    default_ttl: int = 7
    relay_fraction: float = 1.0
    extended: bool = False
    guard_s: float = 60.0
    power_control: bool = False
    power_control_zeta_th_dbm: float = -70.0
    power_control_margin_db: float = 0.0
    power_control_floor_dbm: float = -20.0
    power_control_window: int = 16
    interference_rate_per_s: float = 0.0
    interference_power_dbm: float = -60.0

    @property
    def scan_window_resolved_ms(self) -> float:
        """Explicit window, or the interval minus the scanner turnaround."""
        if self.scan_window_ms is not None:
            return self.scan_window_ms
        return self.scan_interval_ms - self.scan_turnaround_ms

    def problems(self) -> list[str]:
        out: list[str] = []

        def check(ok: bool, msg: str) -> None:
            if not ok:
                out.append(msg)

        check(self.pattern in PATTERNS,
              f"pattern: unknown pattern {self.pattern!r}")
        check(self.mode in MODES, f"mode: unknown mode {self.mode!r}")
        check(0 <= self.message_size_octets <= 380,
              f"message_size_octets: {self.message_size_octets} outside 0..380")
        check(self.iterations >= 1, "iterations: must be >= 1")
        check(self.period_ms > 0, "period_ms: must be > 0")
        check(self.jitter_ms >= 0, "jitter_ms: must be >= 0")
        check(self.seed >= 0, "seed: must be >= 0")
        check(self.adv_interval_ms > 0, "adv_interval_ms: must be > 0")
        check(self.adv_delay_max_ms >= 0, "adv_delay_max_ms: must be >= 0")
        check(self.scan_interval_ms > 0, "scan_interval_ms: must be > 0")
        check(self.scan_turnaround_ms >= 0, "scan_turnaround_ms: must be >= 0")
        if self.scan_window_ms is not None:
            check(0 < self.scan_window_ms <= self.scan_interval_ms,
                  "scan_window_ms: must be in (0, scan_interval_ms]")
        else:
            check(self.scan_interval_ms > self.scan_turnaround_ms,
                  "scan_turnaround_ms: leaves no scan window "
                  "(set scan_window_ms explicitly or shrink the turnaround)")
        check(self.n_adv_events_source >= 1, "n_adv_events_source: must be >= 1")
        check(self.n_adv_events_relay >= 1, "n_adv_events_relay: must be >= 1")
        check(self.relay_buffer_cap >= 1, "relay_buffer_cap: must be >= 1")
        check(self.retry_interval_ms > 0, "retry_interval_ms: must be > 0")
        check(self.retry_cap >= 0, "retry_cap: must be >= 0")
        check(1 <= self.default_ttl <= 127, "default_ttl: outside 1..127")
        check(0 < self.relay_fraction <= 1.0,
              "relay_fraction: must be in (0, 1]")
        check(self.guard_s > 0, "guard_s: must be > 0")
        check(self.power_control_window >= 1,
              "power_control.window: must be >= 1")
        check(self.power_control_floor_dbm <= self.tx_power_dbm,
              "power_control.floor_dbm: above tx_power_dbm")
        check(self.interference_rate_per_s >= 0,
              "interference_rate_per_s: must be >= 0")

        if self.pattern in ("one-to-many", "many-to-one"):
            check(self.controller is not None,
                  f"controller: required for pattern {self.pattern}")
            check(len(self.slaves) >= 1,
                  f"slaves: required for pattern {self.pattern}")
            check(len(set(self.slaves)) == len(self.slaves),
                  "slaves: duplicate entries")
            if self.controller is not None:
                check(self.controller not in self.slaves,
                      "slaves: controller listed as its own slave")
        else:
            check(self.senders >= 1, "senders: must be >= 1")
            check(self.controller is None and not self.slaves,
                  "controller/slaves: only apply to one-to-many/many-to-one")
            check(self.mode == "unicast-acked",
                  "mode: many-to-many supports unicast-acked only")
        return out

    def validate(self) -> "ScenarioConfig":
        probs = self.problems()
        if probs:
            raise ConfigError("invalid scenario:\n  " + "\n  ".join(probs))
        return self

    def workload_signature(self) -> tuple:
        """Fields that must match for two runs to be comparable."""
        return (self.pattern, self.senders, self.mode,
                self.message_size_octets, self.iterations,
                self.controller, self.slaves)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


_RawMap = dict[str, tuple[tuple[str, ...], str]]


def _parse_bool(tokens: tuple[str, ...]) -> bool:
    if tokens[0] not in ("on", "off"):
        raise ValueError(f"expected on/off, got {tokens[0]!r}")
    return tokens[0] == "on"


def _parse_int(tokens: tuple[str, ...]) -> int:
    try:
        return int(tokens[0])
    except ValueError:
        raise ValueError(f"expected integer, got {tokens[0]!r}") from None


def _parse_float(tokens: tuple[str, ...]) -> float:
    try:
        return float(tokens[0])
    except ValueError:
        raise ValueError(f"expected number, got {tokens[0]!r}") from None


def _parse_str(tokens: tuple[str, ...]) -> str:
    return tokens[0]


def _parse_mode(tokens: tuple[str, ...]) -> str:
    return _MODE_ALIASES.get(tokens[0], tokens[0])


def _parse_slaves(tokens: tuple[str, ...]) -> tuple[str, ...]:
    return tokens


# file key -> (attr, parser, wants_many_tokens)
_KEYS: dict[str, tuple[str, object, bool]] = {
    "pattern": ("pattern", _parse_str, False),
    "senders": ("senders", _parse_int, False),
    "mode": ("mode", _parse_mode, False),
    "message_size_octets": ("message_size_octets", _parse_int, False),
    "iterations": ("iterations", _parse_int, False),
    "period_ms": ("period_ms", _parse_float, False),
    "jitter_ms": ("jitter_ms", _parse_float, False),
    "controller": ("controller", _parse_str, False),
    "slaves": ("slaves", _parse_slaves, True),
    "seed": ("seed", _parse_int, False),
    "adv_interval_ms": ("adv_interval_ms", _parse_float, False),
    "adv_delay_max_ms": ("adv_delay_max_ms", _parse_float, False),
    "scan_interval_ms": ("scan_interval_ms", _parse_float, False),
    "scan_window_ms": ("scan_window_ms", _parse_float, False),
    "scan_turnaround_ms": ("scan_turnaround_ms", _parse_float, False),
    "tx_power_dbm": ("tx_power_dbm", _parse_float, False),
    "n_adv_events_source": ("n_adv_events_source", _parse_int, False),
    "n_adv_events_relay": ("n_adv_events_relay", _parse_int, False),
    "relay_buffer_cap": ("relay_buffer_cap", _parse_int, False),
    "retry_interval_ms": ("retry_interval_ms", _parse_float, False),
    "retry_cap": ("retry_cap", _parse_int, False),
    "default_ttl": ("default_ttl", _parse_int, False),
    "relay_fraction": ("relay_fraction", _parse_float, False),
    "extended": ("extended", _parse_bool, False),
    "guard_s": ("guard_s", _parse_float, False),
    "power_control": ("power_control", _parse_bool, False),
    "power_control.zeta_th_dbm": ("power_control_zeta_th_dbm", _parse_float, False),
    "power_control.margin_db": ("power_control_margin_db", _parse_float, False),
    "power_control.floor_dbm": ("power_control_floor_dbm", _parse_float, False),
    "power_control.window": ("power_control_window", _parse_int, False),
    "interference_rate_per_s": ("interference_rate_per_s", _parse_float, False),
    "interference_power_dbm": ("interference_power_dbm", _parse_float, False),
}


def read_scenario_document(text: str) -> _RawMap:
    lines = text.splitlines()
    if not lines or lines[0].strip() != SCENARIO_HEADER:
        raise ConfigError(f"line 1: first line must be {SCENARIO_HEADER!r}")
    raw: _RawMap = {}
    errors: list[str] = []
    for no, rawline in enumerate(lines[1:], start=2):
        line = rawline.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if len(tok) < 2:
            errors.append(f"line {no}: key {tok[0]!r} has no value")
            continue
        if tok[0] in raw:
            errors.append(f"line {no}: duplicate key {tok[0]!r}")
            continue
        raw[tok[0]] = (tuple(tok[1:]), f"line {no}")
    if errors:
        raise ConfigError("invalid scenario:\n  " + "\n  ".join(errors))
    return raw


def apply_overrides(raw: _RawMap, assignments) -> _RawMap:
    """Apply ``key=value`` assignments on top of a parsed document."""
    out = dict(raw)
    for a in assignments:
        key, sep, value = a.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ConfigError(f"override {a!r} is not of the form key=value")
        out[key] = (tuple(value.split()), f"override {key}")
    return out


def scenario_from_raw(raw: _RawMap) -> ScenarioConfig:
    errors: list[str] = []
    kwargs: dict = {}
    for key, (tokens, where) in raw.items():
        spec = _KEYS.get(key)
        if spec is None:
            errors.append(f"{where}: unknown key {key!r}")
            continue
        attr, parse, many = spec
        if not many and len(tokens) != 1:
            errors.append(f"{where}: {key} takes one value")
            continue
        try:
            kwargs[attr] = parse(tokens)
        except ValueError as exc:
            errors.append(f"{where}: {key}: {exc}")

    pattern = kwargs.get("pattern")
    if isinstance(pattern, str):
        m = _MM_SUGAR.match(pattern)
        if m:
            if "senders" in kwargs:
                errors.append(
                    "senders: given both as a key and inside the pattern")
            kwargs["pattern"] = "many-to-many"
            kwargs["senders"] = int(m.group(1))

    if errors:
        raise ConfigError("invalid scenario:\n  " + "\n  ".join(errors))
    return ScenarioConfig(**kwargs).validate()


def load_scenario(text: str, overrides=()) -> ScenarioConfig:
    return scenario_from_raw(apply_overrides(read_scenario_document(text), overrides))


def load_scenario_file(path, overrides=()) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        return load_scenario(fh.read(), overrides)


def scenario_to_document(cfg: ScenarioConfig) -> str:
    """Render a document that loads back to an equal config."""
    lines = [SCENARIO_HEADER]
    for key, (attr, _parse, _many) in _KEYS.items():
        value = getattr(cfg, attr)
        if value is None or (attr == "slaves" and not value):
            continue
        if attr == "pattern" and value == "many-to-many":
            lines.append(f"pattern many-to-many({cfg.senders})")
            continue
        if attr == "senders" and cfg.pattern == "many-to-many":
            continue
        if isinstance(value, bool):
            value = "on" if value else "off"
        elif isinstance(value, tuple):
            value = " ".join(value)
        lines.append(f"{key} {value}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ScheduledSend:
    app_msg_id: int
    time_us: int
    source: str
    dst_node: str | None    # unicast destination
    group: int | None       # group address value
    size_octets: int


def _draw_disjoint_pairs(eligible, k: int, rng: RandomSource):
    for _ in range(PAIR_DRAW_ATTEMPTS):
        used: set[str] = set()
        chosen: list[tuple[str, str]] = []
        for _ in range(k):
            cand = [p for p in eligible
                    if p[0] not in used and p[1] not in used]
            if not cand:
                break
            idx = min(int(rng.draw_uniform(0, len(cand))), len(cand) - 1)
            pair = cand[idx]
            chosen.append(pair)
            used.update(pair)
        if len(chosen) == k:
            return chosen
    raise ConfigError(
        f"could not draw {k} disjoint sender pairs with >= {MIN_PAIR_HOPS} "
        f"hops after {PAIR_DRAW_ATTEMPTS} attempts")


def build_traffic(topology: Topology, cfg: ScenarioConfig,
                  rng: RandomSource) -> tuple[ScheduledSend, ...]:
    """Expand a scenario into per-message sends, sorted by time."""
    cfg.validate()
    period_us = round(cfg.period_ms * 1000)
    sends: list[tuple[int, str, str | None, int | None]] = []

    jitter_us = round(cfg.jitter_ms * 1000)

    def iteration_start(m: int) -> int:
        # one offset per iteration: sends inside an iteration stay
        # simultaneous (worst-case contention) while the iteration's phase
        # relative to the scan cycle is randomized
        t = m * period_us
        if jitter_us == 0:
            return t
        return t + min(int(rng.draw_uniform(0, jitter_us)), jitter_us - 1)

    if cfg.pattern in ("one-to-many", "many-to-one"):
        missing = [n for n in (cfg.controller, *cfg.slaves)
                   if n not in topology.nodes]
        if missing:
            raise ConfigError(
                "scenario names nodes missing from the topology: "
                + ", ".join(repr(m) for m in missing))
        for m in range(cfg.iterations):
            t = iteration_start(m)
            if cfg.mode == "group-acked-fixed":
                sends.append((t, cfg.controller, None, GROUP_ADDRESS))
            else:
                for s in cfg.slaves:
                    sends.append((t, cfg.controller, s, None))
    else:
        if 2 * cfg.senders > len(topology.nodes):
            raise ConfigError(
                f"many-to-many({cfg.senders}) needs {2 * cfg.senders} distinct "
                f"nodes, topology has {len(topology.nodes)}")
        eligible = topology.eligible_pairs(MIN_PAIR_HOPS, cfg.tx_power_dbm)
        if not eligible:
            raise ConfigError(
                f"topology has no pairs >= {MIN_PAIR_HOPS} hops apart")
        for m in range(cfg.iterations):
            t = iteration_start(m)
            for src, dst in _draw_disjoint_pairs(eligible, cfg.senders, rng):
                sends.append((t, src, dst, None))

    sends.sort(key=lambda s: s[0])
    return tuple(
        ScheduledSend(i + 1, t, src, dst, grp, cfg.message_size_octets)
        for i, (t, src, dst, grp) in enumerate(sends))
