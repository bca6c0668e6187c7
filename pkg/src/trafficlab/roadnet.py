"""Road graph, fixed-cycle signal plans, and sensor placements.

A RoadNetwork is immutable after load and shared read-only by every other
stage.  The on-disk form is a sectioned comma-separated text file (see
load_network); an optional [endpoints] section pins entry/exit nodes, since
grid-like graphs have no degree-zero boundary to infer them from.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field


class NetworkError(ValueError):
    """Malformed network file or violated network invariant."""


@dataclass(frozen=True)
class Node:
    id: str
    x: float
    y: float
    signalized: bool = False
    sensor_site: bool = False


@dataclass(frozen=True)
class Segment:
    id: str
    from_node: str
    to_node: str
    length: float
    lanes: int = 1
    speed_limit: float = 13.9
    road_label: str = ""

    @property
    def free_flow_time(self) -> float:
        return self.length / self.speed_limit


@dataclass(frozen=True)
class SignalPhase:
    permitted: frozenset
    duration: float


@dataclass
class SensorPlacement:
    sensor_ids: tuple
    range_m: float = 50.0

    def __post_init__(self):
        self.sensor_ids = tuple(sorted(self.sensor_ids))
        if not self.sensor_ids:
            raise NetworkError("sensor placement must contain at least one sensor")
        if self.range_m <= 0:
            raise NetworkError("sensor range must be positive")


@dataclass
class RoadNetwork:
    nodes: dict
    segments: dict
    signal_plans: dict
    entry_nodes: tuple
    exit_nodes: tuple
    # derived adjacency, rebuilt on construction; excluded from equality
    out_segments: dict = field(default_factory=dict, compare=False, repr=False)
    in_segments: dict = field(default_factory=dict, compare=False, repr=False)
    _route_cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self.entry_nodes = tuple(sorted(self.entry_nodes))
        self.exit_nodes = tuple(sorted(self.exit_nodes))
        self.out_segments = {nid: [] for nid in self.nodes}
        self.in_segments = {nid: [] for nid in self.nodes}
        for sid in sorted(self.segments):
            seg = self.segments[sid]
            if seg.from_node in self.out_segments:
                self.out_segments[seg.from_node].append(sid)
            if seg.to_node in self.in_segments:
                self.in_segments[seg.to_node].append(sid)
        self._route_cache = {}

    def outgoing(self, node_id: str) -> list:
        return self.out_segments[node_id]

    def incoming(self, node_id: str) -> list:
        return self.in_segments[node_id]

    def cycle_length(self, node_id: str) -> float:
        return sum(p.duration for p in self.signal_plans[node_id])

    def phase_index_at(self, node_id: str, t: float) -> int:
        plan = self.signal_plans[node_id]
        tt = t % self.cycle_length(node_id)
        acc = 0.0
        for i, phase in enumerate(plan):
            acc += phase.duration
            if tt < acc:
                return i
        return len(plan) - 1


def _parse_bool(token: str, where: str) -> bool:
    t = token.strip().lower()
    if t in ("1", "true", "yes"):
        return True
    if t in ("0", "false", "no"):
        return False
    raise NetworkError(f"{where}: expected boolean flag, got {token!r}")


_SECTION_HEADERS = {
    "[nodes]": "id,x,y,signalized,sensor_site",
    "[segments]": "id,from,to,length_m,lanes,speed_limit_mps,road_label",
    "[signals]": "node_id,phase_index,permitted_segment_ids,duration_s",
    "[endpoints]": "kind,node_id",
}


def load_network(path) -> RoadNetwork:
    """Parse and validate a sectioned network file.

    Sections: [nodes], [segments], [signals] (required, possibly empty), and
    an optional [endpoints] section of kind,node_id rows with kind in
    {entry, exit}.  When [endpoints] is absent, nodes with zero in-degree are
    entries and nodes with zero out-degree are exits; if neither exists every
    node serves as both.
    """
    nodes: dict = {}
    segments: dict = {}
    raw_signals: dict = {}
    endpoints_given = False
    entries: list = []
    exits: list = []

    section = None
    expect_header = False
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            where = f"{path}:{lineno}"
            if line.lower() in _SECTION_HEADERS:
                section = line.lower()
                expect_header = True
                if section == "[endpoints]":
                    endpoints_given = True
                continue
            if section is None:
                raise NetworkError(f"{where}: data before any section header")
            if expect_header:
                if line.replace(" ", "") != _SECTION_HEADERS[section]:
                    raise NetworkError(
                        f"{where}: expected header {_SECTION_HEADERS[section]!r} "
                        f"for section {section}")
                expect_header = False
                continue
            fields = [f.strip() for f in line.split(",")]
            try:
                if section == "[nodes]":
                    if len(fields) != 5:
                        raise NetworkError(f"{where}: node row needs 5 fields")
                    nid = fields[0]
                    if nid in nodes:
                        raise NetworkError(f"{where}: duplicate node id {nid!r}")
                    nodes[nid] = Node(nid, float(fields[1]), float(fields[2]),
                                      _parse_bool(fields[3], where),
                                      _parse_bool(fields[4], where))
                elif section == "[segments]":
                    if len(fields) != 7:
                        raise NetworkError(f"{where}: segment row needs 7 fields")
                    sid = fields[0]
                    if sid in segments:
                        raise NetworkError(f"{where}: duplicate segment id {sid!r}")
                    segments[sid] = Segment(sid, fields[1], fields[2],
                                            float(fields[3]), int(fields[4]),
                                            float(fields[5]), fields[6])
                elif section == "[signals]":
                    if len(fields) != 4:
                        raise NetworkError(f"{where}: signal row needs 4 fields")
                    nid, idx = fields[0], int(fields[1])
                    permitted = frozenset(
                        s for s in fields[2].split(";") if s)
                    raw_signals.setdefault(nid, []).append(
                        (idx, SignalPhase(permitted, float(fields[3]))))
                else:  # [endpoints]
                    if len(fields) != 2:
                        raise NetworkError(f"{where}: endpoint row needs 2 fields")
                    kind, nid = fields
                    if kind == "entry":
                        entries.append(nid)
                    elif kind == "exit":
                        exits.append(nid)
                    else:
                        raise NetworkError(
                            f"{where}: endpoint kind must be entry or exit")
            except ValueError as exc:
                if isinstance(exc, NetworkError):
                    raise
                raise NetworkError(f"{where}: {exc}") from exc

    signal_plans = {}
    for nid, phases in raw_signals.items():
        phases.sort(key=lambda p: p[0])
        indices = [p[0] for p in phases]
        if indices != list(range(len(phases))):
            raise NetworkError(
                f"signal plan for node {nid!r}: phase indices must be 0..k-1")
        signal_plans[nid] = tuple(p[1] for p in phases)

    if not endpoints_given:
        has_in = {s.to_node for s in segments.values()}
        has_out = {s.from_node for s in segments.values()}
        entries = [nid for nid in nodes if nid not in has_in]
        exits = [nid for nid in nodes if nid not in has_out]
        if not entries and not exits:
            entries = list(nodes)
            exits = list(nodes)

    net = RoadNetwork(nodes, segments, signal_plans,
                      tuple(entries), tuple(exits))
    validate_network(net)
    return net


def _fmt(x: float) -> str:
    return repr(int(x)) if float(x).is_integer() else repr(float(x))


def save_network(net: RoadNetwork, path) -> None:
    lines = ["[nodes]", "id,x,y,signalized,sensor_site"]
    for nid in sorted(net.nodes):
        n = net.nodes[nid]
        lines.append(f"{n.id},{_fmt(n.x)},{_fmt(n.y)},"
                     f"{int(n.signalized)},{int(n.sensor_site)}")
    lines += ["", "[segments]",
              "id,from,to,length_m,lanes,speed_limit_mps,road_label"]
    for sid in sorted(net.segments):
        s = net.segments[sid]
        lines.append(f"{s.id},{s.from_node},{s.to_node},{_fmt(s.length)},"
                     f"{s.lanes},{_fmt(s.speed_limit)},{s.road_label}")
    lines += ["", "[signals]", "node_id,phase_index,permitted_segment_ids,duration_s"]
    for nid in sorted(net.signal_plans):
        for i, phase in enumerate(net.signal_plans[nid]):
            perm = ";".join(sorted(phase.permitted))
            lines.append(f"{nid},{i},{perm},{_fmt(phase.duration)}")
    lines += ["", "[endpoints]", "kind,node_id"]
    for nid in net.entry_nodes:
        lines.append(f"entry,{nid}")
    for nid in net.exit_nodes:
        lines.append(f"exit,{nid}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def validate_network(net: RoadNetwork) -> None:
    if not net.nodes:
        raise NetworkError("network has no nodes")
    for nid, node in net.nodes.items():
        if not (math.isfinite(node.x) and math.isfinite(node.y)):
            raise NetworkError(f"node {nid!r} has non-finite coordinates")
    for sid, seg in net.segments.items():
        for endpoint in (seg.from_node, seg.to_node):
            if endpoint not in net.nodes:
                raise NetworkError(
                    f"segment {sid!r} references missing node {endpoint!r}")
        if seg.from_node == seg.to_node:
            raise NetworkError(f"segment {sid!r} is a self-loop")
        if seg.length <= 0:
            raise NetworkError(f"segment {sid!r} has non-positive length")
        if seg.lanes < 1:
            raise NetworkError(f"segment {sid!r} has lanes < 1")
        if seg.speed_limit <= 0:
            raise NetworkError(f"segment {sid!r} has non-positive speed limit")
        a, b = net.nodes[seg.from_node], net.nodes[seg.to_node]
        dist = math.hypot(a.x - b.x, a.y - b.y)
        if dist == 0:
            raise NetworkError(
                f"segment {sid!r} connects coincident node positions")
        if abs(seg.length - dist) > 0.2 * dist:
            raise NetworkError(
                f"segment {sid!r}: length {seg.length} inconsistent with "
                f"endpoint distance {dist:.1f} (>20% off)")

    # weak connectivity over the undirected skeleton
    if net.segments:
        adj: dict = {nid: set() for nid in net.nodes}
        for seg in net.segments.values():
            adj[seg.from_node].add(seg.to_node)
            adj[seg.to_node].add(seg.from_node)
        start = next(iter(sorted(net.nodes)))
        seen = {start}
        stack = [start]
        while stack:
            cur = stack.pop()
            for nxt in adj[cur]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        if seen != set(net.nodes):
            missing = sorted(set(net.nodes) - seen)
            raise NetworkError(
                f"network is not weakly connected; unreachable: {missing}")

    for nid in net.entry_nodes:
        if nid not in net.nodes:
            raise NetworkError(f"entry node {nid!r} does not exist")
    for nid in net.exit_nodes:
        if nid not in net.nodes:
            raise NetworkError(f"exit node {nid!r} does not exist")
    if not net.entry_nodes or not net.exit_nodes:
        raise NetworkError("network needs at least one entry and one exit node")

    exits = set(net.exit_nodes)
    for entry in net.entry_nodes:
        reach = _reachable(net, entry)
        if not (reach & exits):
            raise NetworkError(f"entry node {entry!r} reaches no exit node")

    for nid, plan in net.signal_plans.items():
        if nid not in net.nodes:
            raise NetworkError(f"signal plan references missing node {nid!r}")
        if not net.nodes[nid].signalized:
            raise NetworkError(f"signal plan on unsignalized node {nid!r}")
        if not plan:
            raise NetworkError(f"empty signal plan for node {nid!r}")
        incoming = set(net.incoming(nid))
        covered: set = set()
        for i, phase in enumerate(plan):
            if phase.duration <= 0:
                raise NetworkError(
                    f"node {nid!r} phase {i} has non-positive duration")
            extra = phase.permitted - incoming
            if extra:
                raise NetworkError(
                    f"node {nid!r} phase {i} permits non-incoming segments "
                    f"{sorted(extra)}")
            covered |= phase.permitted
        never_green = incoming - covered
        if never_green:
            raise NetworkError(
                f"node {nid!r}: incoming segments never permitted "
                f"{sorted(never_green)} (would deadlock)")
    for nid, node in net.nodes.items():
        if node.signalized and net.incoming(nid) and nid not in net.signal_plans:
            raise NetworkError(f"signalized node {nid!r} has no signal plan")


def validate_placement(net: RoadNetwork, placement: SensorPlacement) -> None:
    for sid in placement.sensor_ids:
        if sid not in net.nodes:
            raise NetworkError(f"sensor id {sid!r} is not a network node")
        if not net.nodes[sid].sensor_site:
            raise NetworkError(f"node {sid!r} is not a sensor site")


def _reachable(net: RoadNetwork, start: str) -> set:
    seen = {start}
    stack = [start]
    while stack:
        cur = stack.pop()
        for sid in net.outgoing(cur):
            nxt = net.segments[sid].to_node
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


def contiguous_sensor_pairs(net: RoadNetwork, placement: SensorPlacement) -> list:
    """All ordered sensor pairs (a, b) linked by a directed path whose
    intermediate nodes are all unsensored.  Sorted by (a, b)."""
    validate_placement(net, placement)
    sensors = set(placement.sensor_ids)
    pairs = set()
    for a in placement.sensor_ids:
        seen = set()
        stack = []
        for sid in net.outgoing(a):
            stack.append(net.segments[sid].to_node)
        while stack:
            cur = stack.pop()
            if cur in seen:
                continue
            seen.add(cur)
            if cur in sensors:
                if cur != a:
                    pairs.add((a, cur))
                continue  # a sensor node blocks further contiguity
            for sid in net.outgoing(cur):
                nxt = net.segments[sid].to_node
                if nxt not in seen:
                    stack.append(nxt)
    return sorted(pairs)


def shortest_route(net: RoadNetwork, origin: str, destination: str) -> tuple:
    """Minimal free-flow-time route as a tuple of segment ids.

    Ties broken lexicographically on the segment-id sequence: the heap orders
    entries by (cost, route), so the first settlement of a node carries the
    lexicographically smallest route among minimal-cost ones.
    """
    key = (origin, destination)
    cached = net._route_cache.get(key)
    if cached is not None:
        return cached
    if origin not in net.nodes or destination not in net.nodes:
        raise NetworkError(f"unknown route endpoint in {key}")
    heap = [(0.0, (), origin)]
    settled = set()
    while heap:
        cost, route, node = heapq.heappop(heap)
        if node in settled:
            continue
        settled.add(node)
        if node == destination:
            net._route_cache[key] = route
            return route
        for sid in net.outgoing(node):
            seg = net.segments[sid]
            if seg.to_node not in settled:
                heapq.heappush(
                    heap, (cost + seg.free_flow_time, route + (sid,), seg.to_node))
    raise NetworkError(f"no route from {origin!r} to {destination!r}")


def route_length(net: RoadNetwork, route) -> float:
    return sum(net.segments[sid].length for sid in route)
