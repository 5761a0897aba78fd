"""Road-network model: links, lanes, movements, signal phases.

A network is a directed graph of intersections joined by one-way links.
Every link carries one or more lanes; a *movement* connects an incoming
lane to an outgoing link's lane across an intersection.  Signal phases
are sets of movements that may legally run at the same time; each
four-arm intersection gets the eight standard phases (two-arm and
three-arm intersections get the non-empty, non-duplicate subset).

Conventions used throughout:

* ports are compass slots ``N=0, E=1, S=2, W=3``; a neighbor "sits at"
  a port of the intersection,
* turn direction of a movement from port ``p`` to port ``q`` is
  ``(q - p) % 4``: 1 = left, 2 = straight, 3 = right (0 would be a
  U-turn, which is never generated),
* lane 0 is the innermost lane: it turns left only; every other lane
  goes straight or right.  Single-lane links may do all three.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

LEFT, STRAIGHT, RIGHT = 1, 2, 3
TURN_NAMES = {LEFT: "left", STRAIGHT: "straight", RIGHT: "right"}
PORT_NAMES = ("N", "E", "S", "W")

#: graph_distance() result for disconnected pairs.
UNREACHABLE = -1


@dataclass(frozen=True, slots=True)
class LaneRef:
    """Address of one lane: (link id, lane index within the link)."""

    link: int
    lane: int


@dataclass(frozen=True, slots=True)
class Movement:
    """One legal crossing of an intersection, lane to lane."""

    from_lane: LaneRef
    to_lane: LaneRef
    turn: int  # LEFT / STRAIGHT / RIGHT


@dataclass(frozen=True, slots=True)
class Phase:
    """A set of non-conflicting movements that share green time."""

    index: int
    movements: tuple[Movement, ...]

    def link_pairs(self) -> set[tuple[int, int]]:
        """(incoming link, outgoing link) pairs permitted by this phase."""
        return {(m.from_lane.link, m.to_lane.link) for m in self.movements}


@dataclass(slots=True)
class Link:
    """One-directional road segment between two intersections."""

    index: int
    tail: int  # upstream intersection
    head: int  # downstream intersection
    length_m: float
    lane_count: int
    lane_capacity: int  # vehicles per lane
    free_flow_speed: float  # m/s, non-EMV
    emv_free_flow_speed: float  # m/s, EMV with an emergency lane formed
    ec_coefficient: float = 0.0  # emergency capacity as a fraction of capacity

    @property
    def capacity(self) -> int:
        """x_max(l): total vehicles the link can hold."""
        return self.lane_count * self.lane_capacity

    @property
    def emergency_capacity(self) -> float:
        """C_i^EC: extra headroom available once an emergency lane forms."""
        return self.ec_coefficient * self.capacity

    @property
    def free_flow_time(self) -> float:
        return self.length_m / self.free_flow_speed

    def lanes(self) -> list[LaneRef]:
        return [LaneRef(self.index, i) for i in range(self.lane_count)]


@dataclass(slots=True)
class Intersection:
    index: int
    ports: dict[int, int]  # port -> neighbor intersection id
    pos: tuple[int, int] | None = None  # (row, col) on grids, None otherwise
    in_links: list[int] = field(default_factory=list)
    out_links: list[int] = field(default_factory=list)
    movements: list[Movement] = field(default_factory=list)
    phases: list[Phase] = field(default_factory=list)

    @property
    def neighbors(self) -> list[int]:
        return [self.ports[p] for p in sorted(self.ports)]


class PhaseConflictError(ValueError):
    """A generated phase contains two crossing movements."""


def movements_conflict(port_a: int, turn_a: int, port_b: int, turn_b: int) -> bool:
    """True if two movements' paths cross inside the intersection.

    Right turns hug the corner and never cross anything.  Movements from
    the same arm share lanes, not conflict points.  Opposing arms clash
    only when a left meets the oncoming straight; perpendicular arms
    clash whenever both movements are straights or lefts.
    """
    if port_a == port_b:
        return False
    if RIGHT in (turn_a, turn_b):
        return False
    if (port_a - port_b) % 4 == 2:  # opposing arms
        return {turn_a, turn_b} == {LEFT, STRAIGHT}
    return True  # perpendicular, both in {left, straight}


# The eight standard phases of a four-arm intersection, as
# (set of incoming ports, set of permitted turns).
PHASE_TEMPLATES: tuple[tuple[frozenset[int], frozenset[int]], ...] = (
    (frozenset({0, 2}), frozenset({STRAIGHT, RIGHT})),  # N+S through
    (frozenset({0, 2}), frozenset({LEFT})),  # N+S left
    (frozenset({1, 3}), frozenset({STRAIGHT, RIGHT})),  # E+W through
    (frozenset({1, 3}), frozenset({LEFT})),  # E+W left
    (frozenset({0}), frozenset({LEFT, STRAIGHT, RIGHT})),  # all from N
    (frozenset({1}), frozenset({LEFT, STRAIGHT, RIGHT})),  # all from E
    (frozenset({2}), frozenset({LEFT, STRAIGHT, RIGHT})),  # all from S
    (frozenset({3}), frozenset({LEFT, STRAIGHT, RIGHT})),  # all from W
)


def lane_turns(lane: int, lane_count: int) -> frozenset[int]:
    """Permitted turns for a lane index (0 innermost)."""
    if lane_count == 1:
        return frozenset({LEFT, STRAIGHT, RIGHT})
    if lane == 0:
        return frozenset({LEFT})
    return frozenset({STRAIGHT, RIGHT})


class Network:
    """Immutable-after-build road network with validated phases."""

    def __init__(self, intersections: list[Intersection], links: list[Link]):
        self.intersections = intersections
        self.links = links
        self._link_by_nodes: dict[tuple[int, int], int] = {}
        for lk in links:
            key = (lk.tail, lk.head)
            if key in self._link_by_nodes:
                raise ValueError(f"duplicate link {key}")
            self._link_by_nodes[key] = lk.index
        self._dist_cache: dict[int, list[int]] = {}
        self._wire()
        self._build_phases()
        self.validate()

    # -- construction ------------------------------------------------

    def _wire(self) -> None:
        for node in self.intersections:
            node.in_links = []
            node.out_links = []
        for lk in self.links:
            self.intersections[lk.tail].out_links.append(lk.index)
            self.intersections[lk.head].in_links.append(lk.index)
        for node in self.intersections:
            node.in_links.sort()
            node.out_links.sort()

    def _build_phases(self) -> None:
        for node in self.intersections:
            node.movements = self._node_movements(node)
            node.phases = self._node_phases(node)

    def _node_movements(self, node: Intersection) -> list[Movement]:
        port_of = {nbr: port for port, nbr in node.ports.items()}
        moves: list[Movement] = []
        for in_id in node.in_links:
            in_link = self.links[in_id]
            p = port_of[in_link.tail]
            for out_id in node.out_links:
                out_link = self.links[out_id]
                q = port_of[out_link.head]
                turn = (q - p) % 4
                if turn == 0:  # U-turn
                    continue
                for lane in range(in_link.lane_count):
                    if turn not in lane_turns(lane, in_link.lane_count):
                        continue
                    src = LaneRef(in_id, lane)
                    for dst in out_link.lanes():
                        moves.append(Movement(src, dst, turn))
        return moves

    def _node_phases(self, node: Intersection) -> list[Phase]:
        port_of = {nbr: port for port, nbr in node.ports.items()}

        def in_port(m: Movement) -> int:
            return port_of[self.links[m.from_lane.link].tail]

        raw: list[tuple[Movement, ...]] = []
        for ports, turns in PHASE_TEMPLATES:
            sel = tuple(
                m for m in node.movements if in_port(m) in ports and m.turn in turns
            )
            if sel:
                raw.append(sel)
        phases: list[Phase] = []
        seen: set[frozenset[Movement]] = set()
        for sel in raw:  # drop exact duplicates, keep first occurrence
            key = frozenset(sel)
            if key in seen:
                continue
            seen.add(key)
            phases.append(Phase(len(phases), sel))
        return phases

    # -- validation --------------------------------------------------

    def validate(self) -> None:
        for node in self.intersections:
            port_of = {nbr: port for port, nbr in node.ports.items()}
            covered: set[Movement] = set()
            for phase in node.phases:
                covered.update(phase.movements)
                self._check_phase_conflicts(node, phase, port_of)
            missing = set(node.movements) - covered
            if missing:
                raise ValueError(
                    f"intersection {node.index}: {len(missing)} movements in no phase"
                )
            if node.movements and len(node.phases) < 2:
                raise ValueError(
                    f"intersection {node.index}: only {len(node.phases)} phase(s)"
                )

    def _check_phase_conflicts(
        self, node: Intersection, phase: Phase, port_of: dict[int, int]
    ) -> None:
        ms = phase.movements
        for i in range(len(ms)):
            pa = port_of[self.links[ms[i].from_lane.link].tail]
            for j in range(i + 1, len(ms)):
                pb = port_of[self.links[ms[j].from_lane.link].tail]
                if movements_conflict(pa, ms[i].turn, pb, ms[j].turn):
                    raise PhaseConflictError(
                        f"intersection {node.index} phase {phase.index}: "
                        f"{PORT_NAMES[pa]}-{TURN_NAMES[ms[i].turn]} crosses "
                        f"{PORT_NAMES[pb]}-{TURN_NAMES[ms[j].turn]}"
                    )

    # -- queries -----------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self.intersections)

    def link_between(self, tail: int, head: int) -> int | None:
        return self._link_by_nodes.get((tail, head))

    def out_links(self, node: int) -> list[int]:
        return self.intersections[node].out_links

    def in_links(self, node: int) -> list[int]:
        return self.intersections[node].in_links

    def downstream_links(self, link_id: int) -> list[int]:
        """Outgoing links reachable from `link_id` by some movement."""
        head = self.links[link_id].head
        seen: set[int] = set()
        for m in self.intersections[head].movements:
            if m.from_lane.link == link_id:
                seen.add(m.to_lane.link)
        return sorted(seen)

    def graph_distance(self, a: int, b: int) -> int:
        """Hop distance on the undirected intersection graph.

        Returns UNREACHABLE (-1) for disconnected pairs; callers doing
        discounted sums must skip those.
        """
        if a not in self._dist_cache:
            dist = [UNREACHABLE] * self.n_nodes
            dist[a] = 0
            q = deque([a])
            while q:
                u = q.popleft()
                for v in self.intersections[u].neighbors:
                    if dist[v] == UNREACHABLE:
                        dist[v] = dist[u] + 1
                        q.append(v)
            self._dist_cache[a] = dist
        return self._dist_cache[a][b]

    def diameter_from(self, node: int) -> int:
        """Largest finite hop distance from `node`."""
        self.graph_distance(node, node)
        return max(d for d in self._dist_cache[node] if d != UNREACHABLE)


def default_lane_capacity(length_m: float) -> int:
    """Vehicles one lane can hold at ~7.5 m headway."""
    return max(1, math.floor(length_m / 7.5))


def build_grid(
    rows: int,
    cols: int,
    *,
    link_length_m: float = 200.0,
    lane_count: int = 2,
    lane_capacity: int | None = None,
    free_flow_speed: float = 6.0,
    emv_free_flow_speed: float = 12.0,
    ec_coefficients: dict[tuple[int, int], float] | None = None,
) -> Network:
    """Build a rows x cols grid with two one-way links per adjacency.

    `ec_coefficients` maps (tail, head) intersection pairs to emergency
    capacity coefficients; everything else gets 0.
    """
    if rows < 1 or cols < 1 or rows * cols < 2:
        raise ValueError("grid needs at least two intersections")
    cap = lane_capacity if lane_capacity is not None else default_lane_capacity(link_length_m)
    ecs = ec_coefficients or {}

    def nid(r: int, c: int) -> int:
        return r * cols + c

    intersections: list[Intersection] = []
    for r in range(rows):
        for c in range(cols):
            ports: dict[int, int] = {}
            if r > 0:
                ports[0] = nid(r - 1, c)  # N
            if c < cols - 1:
                ports[1] = nid(r, c + 1)  # E
            if r < rows - 1:
                ports[2] = nid(r + 1, c)  # S
            if c > 0:
                ports[3] = nid(r, c - 1)  # W
            intersections.append(Intersection(nid(r, c), ports, pos=(r, c)))

    links: list[Link] = []
    for node in intersections:
        for nbr in node.neighbors:
            if nbr < node.index:
                continue
            for tail, head in ((node.index, nbr), (nbr, node.index)):
                links.append(
                    Link(
                        index=len(links),
                        tail=tail,
                        head=head,
                        length_m=link_length_m,
                        lane_count=lane_count,
                        lane_capacity=cap,
                        free_flow_speed=free_flow_speed,
                        emv_free_flow_speed=emv_free_flow_speed,
                        ec_coefficient=ecs.get((tail, head), 0.0),
                    )
                )
    return Network(intersections, links)


def border_nodes(net: Network) -> list[int]:
    """Intersections with fewer than four ports (grid boundary)."""
    return [n.index for n in net.intersections if len(n.ports) < 4]
