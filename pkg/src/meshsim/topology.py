"""Topology documents: node placement, pairwise loss, and hop structure.

Format (UTF-8, line oriented, ``#`` comments)::

    meshsim-topology v1
    floor-attenuation-db 15        # optional, default 15
    node <id> <floor> <x> <y>      # coordinate node (meters)
    node <id>                      # abstract node, loss given explicitly
    loss <a> <b> <dB>              # pairwise override, symmetric

Coordinate pairs get log-distance path loss over the 3-D separation (floors
are 3 m apart) plus the per-floor attenuation once per floor crossed.  Any
pair involving an abstract node must be covered by a ``loss`` line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib.resources import files

from .errors import ConfigError
from .radio import path_loss_db

TOPOLOGY_HEADER = "meshsim-topology v1"
DEFAULT_FLOOR_ATTENUATION_DB = 15.0
FLOOR_HEIGHT_M = 3.0

# connectivity-graph edge rule: mean RSSI at full power clears sensitivity
# by this margin (shadowing excluded)
EDGE_SENSITIVITY_DBM = -90.0
EDGE_MARGIN_DB = 5.0

UNREACHABLE = math.inf


@dataclass(frozen=True)
class TopologyNode:
    node_id: str
    floor: int | None = None
    x: float | None = None
    y: float | None = None

    @property
    def placed(self) -> bool:
        return self.floor is not None


def _pair(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


class Topology:
    """Immutable node set with a total pairwise loss function."""

    def __init__(self, nodes, floor_attenuation_db=DEFAULT_FLOOR_ATTENUATION_DB,
                 overrides=None):
        self.nodes: dict[str, TopologyNode] = dict(nodes)
        self.floor_attenuation_db = float(floor_attenuation_db)
        self.overrides: dict[tuple[str, str], float] = dict(overrides or {})

    @property
    def node_ids(self) -> tuple[str, ...]:
        return tuple(self.nodes)

    def path_loss_db(self, a: str, b: str) -> float:
        for nid in (a, b):
            if nid not in self.nodes:
                raise ConfigError(f"unknown node {nid!r}")
        if a == b:
            raise ConfigError(f"path loss of node {a!r} to itself")
        key = _pair(a, b)
        if key in self.overrides:
            return self.overrides[key]
        na, nb = self.nodes[a], self.nodes[b]
        dfloors = abs(na.floor - nb.floor)
        d = math.hypot(na.x - nb.x, na.y - nb.y, FLOOR_HEIGHT_M * dfloors)
        return path_loss_db(d) + self.floor_attenuation_db * dfloors

    def loss_map(self) -> dict[tuple[str, str], float]:
        """Loss for every ordered pair; symmetric by construction."""
        out: dict[tuple[str, str], float] = {}
        ids = self.node_ids
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                v = self.path_loss_db(a, b)
                out[(a, b)] = v
                out[(b, a)] = v
        return out

    def adjacency(self, tx_power_dbm: float = 0.0) -> dict[str, tuple[str, ...]]:
        limit = tx_power_dbm - (EDGE_SENSITIVITY_DBM + EDGE_MARGIN_DB)
        ids = self.node_ids
        neigh: dict[str, list[str]] = {n: [] for n in ids}
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                if self.path_loss_db(a, b) <= limit:
                    neigh[a].append(b)
                    neigh[b].append(a)
        return {n: tuple(v) for n, v in neigh.items()}

    def hop_distance(self, a: str, b: str, tx_power_dbm: float = 0.0) -> float:
        """Shortest hop count on the connectivity graph; UNREACHABLE if none."""
        for nid in (a, b):
            if nid not in self.nodes:
                raise ConfigError(f"unknown node {nid!r}")
        if a == b:
            return 0
        adj = self.adjacency(tx_power_dbm)
        dist = {a: 0}
        frontier = [a]
        while frontier:
            nxt: list[str] = []
            for u in frontier:
                for v in adj[u]:
                    if v not in dist:
                        dist[v] = dist[u] + 1
                        if v == b:
                            return dist[v]
                        nxt.append(v)
            frontier = nxt
        return UNREACHABLE

    def eligible_pairs(self, min_hops: int = 2,
                       tx_power_dbm: float = 0.0) -> tuple[tuple[str, str], ...]:
        """Ordered (src, dst) pairs at least min_hops apart and reachable."""
        adj = self.adjacency(tx_power_dbm)
        out: list[tuple[str, str]] = []
        for a in self.node_ids:
            dist = {a: 0}
            frontier = [a]
            while frontier:
                nxt: list[str] = []
                for u in frontier:
                    for v in adj[u]:
                        if v not in dist:
                            dist[v] = dist[u] + 1
                            nxt.append(v)
                frontier = nxt
            for b in self.node_ids:
                d = dist.get(b)
                if b != a and d is not None and d >= min_hops:
                    out.append((a, b))
        return tuple(out)


def flood_reaches_all(topology: Topology, relays: set[str],
                      tx_power_dbm: float = 0.0) -> bool:
    """True when `relays` preserve the coverage an all-relay flood achieves.

    Sources always transmit their own messages, so the origin forwards
    regardless of relay membership.  Nodes that no flood reaches even with
    every node forwarding do not count against the subset.
    """
    adj = topology.adjacency(tx_power_dbm)

    def coverage(src: str, forwarding: set[str] | None) -> set[str]:
        reached = {src}
        frontier = [src]
        while frontier:
            nxt: list[str] = []
            for u in frontier:
                if u != src and forwarding is not None and u not in forwarding:
                    continue
                for v in adj[u]:
                    if v not in reached:
                        reached.add(v)
                        nxt.append(v)
            frontier = nxt
        return reached

    for src in topology.node_ids:
        if coverage(src, relays) != coverage(src, None):
            return False
    return True


def load_topology(text: str) -> Topology:
    """Parse a topology document, reporting every problem found."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != TOPOLOGY_HEADER:
        raise ConfigError(f"line 1: first line must be {TOPOLOGY_HEADER!r}")

    errors: list[str] = []
    nodes: dict[str, TopologyNode] = {}
    att: float | None = None
    loss_entries: list[tuple[str, str, float, int]] = []

    for no, raw in enumerate(lines[1:], start=2):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] == "floor-attenuation-db":
            if len(tok) != 2:
                errors.append(f"line {no}: floor-attenuation-db takes one value")
                continue
            if att is not None:
                errors.append(f"line {no}: duplicate floor-attenuation-db")
                continue
            try:
                att = float(tok[1])
            except ValueError:
                errors.append(f"line {no}: bad attenuation {tok[1]!r}")
        elif tok[0] == "node":
            if len(tok) not in (2, 5):
                errors.append(
                    f"line {no}: node takes <id> or <id> <floor> <x> <y>")
                continue
            nid = tok[1]
            if nid in nodes:
                errors.append(f"line {no}: duplicate node {nid!r}")
                continue
            if len(tok) == 2:
                nodes[nid] = TopologyNode(nid)
                continue
            try:
                floor = int(tok[2])
                x, y = float(tok[3]), float(tok[4])
            except ValueError:
                errors.append(f"line {no}: bad coordinates for node {nid!r}")
                continue
            nodes[nid] = TopologyNode(nid, floor, x, y)
        elif tok[0] == "loss":
            if len(tok) != 4:
                errors.append(f"line {no}: loss takes <a> <b> <dB>")
                continue
            try:
                val = float(tok[3])
            except ValueError:
                errors.append(f"line {no}: bad loss value {tok[3]!r}")
                continue
            loss_entries.append((tok[1], tok[2], val, no))
        else:
            errors.append(f"line {no}: unknown directive {tok[0]!r}")

    overrides: dict[tuple[str, str], float] = {}
    first_line: dict[tuple[str, str], int] = {}
    for a, b, val, no in loss_entries:
        if a == b:
            errors.append(f"line {no}: loss of node {a!r} to itself")
            continue
        missing = [n for n in (a, b) if n not in nodes]
        if missing:
            errors.append(
                f"line {no}: loss references unknown node"
                f" {', '.join(repr(m) for m in missing)}")
            continue
        key = _pair(a, b)
        if key in overrides:
            if overrides[key] != val:
                errors.append(
                    f"line {no}: loss({a},{b})={val} conflicts with "
                    f"line {first_line[key]} (asymmetric pair {key[0]},{key[1]})")
            continue
        overrides[key] = val
        first_line[key] = no

    if len(nodes) < 2:
        errors.append(f"topology needs at least 2 nodes, found {len(nodes)}")

    ids = list(nodes)
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            if _pair(a, b) in overrides:
                continue
            na, nb = nodes[a], nodes[b]
            if not (na.placed and nb.placed):
                errors.append(
                    f"pair ({a},{b}) has no loss entry and "
                    f"{'both nodes lack' if not (na.placed or nb.placed) else 'one node lacks'}"
                    " coordinates")
            elif (na.floor, na.x, na.y) == (nb.floor, nb.x, nb.y):
                errors.append(f"nodes {a!r} and {b!r} share the same position")

    if errors:
        raise ConfigError("invalid topology:\n  " + "\n  ".join(errors))
    return Topology(nodes, att if att is not None else DEFAULT_FLOOR_ATTENUATION_DB,
                    overrides)


def bundled_data_path(name: str):
    return files("meshsim").joinpath("data", name)


def load_bundled_topology(name: str) -> Topology:
    return load_topology(bundled_data_path(name).read_text(encoding="utf-8"))
