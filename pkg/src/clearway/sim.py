"""Deterministic mesoscopic traffic simulator.

Links are point queues: a vehicle entering a link becomes dischargeable
at its head after length/free_flow_speed seconds; queues are vertical
(no shockwaves) but a lane refuses entry at capacity, which gives
spillback blocking.  Discharge runs through the active phase's
movements at a saturation rate per incoming lane, metered by a
fractional accumulator that resets while the lane has no green (no
platoon bursts).  Non-emergency vehicles follow fixed shortest-distance
routes chosen at spawn; on entering a link they take the least-occupied
lane among those permitting their next turn (ties to the lowest index).

The emergency vehicle lives outside the lane queues.  Each sub-step it
moves at the speed given by the emergency-lane rule: full declared
speed when the link's non-EMV count is at most
capacity + emergency_capacity - capacity/lane_count, otherwise the
link's current average speed (queued vehicles count as stopped).  At
the stop line it crosses only when the active phase permits its
movement; at its destination it leaves immediately.  It is counted in
link occupancy seen by pressure and observations (attributed to lane 0
of its link) but consumes no discharge capacity and no queue slot.

Conservation holds exactly at every sub-step: vehicles that entered the
network = completed + still in the network.  Arrivals that find their
entry lanes full wait in a pending backlog (counted separately, never
dropped).  All randomness (random-OD draws) comes from one seeded
generator, so identical scenario + seed + actions give bit-identical
metrics.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .net import LaneRef, Network, border_nodes, lane_turns
from .routing import a_star_route, intra_link_travel_time, route_links
from .scenario import FlowSpec, Scenario

EventRow = tuple[float, str, int, str]
EMV_ID = -1


def emv_speed(
    n: float, k: float, lanes: int, c_ec: float, s_avg: float, s_free: float
) -> tuple[float, bool]:
    """Speed of the emergency vehicle on a link, and lane-formed flag.

    The emergency lane can form while n <= k + C - k/lanes; then the
    vehicle runs at its free-flow speed, else at the link average.
    """
    formed = n <= k + c_ec - k / lanes
    return (s_free, True) if formed else (s_avg, False)


@dataclass(slots=True)
class Vehicle:
    vid: int
    route: tuple[int, ...]  # node ids, origin..destination
    spawn_s: float
    route_pos: int = 0  # on link route[route_pos] -> route[route_pos + 1]
    lane: LaneRef | None = None
    ready_s: float = 0.0  # dischargeable at the link head from this time


@dataclass(slots=True)
class EmvState:
    origin: int
    destination: int
    dispatch_s: float
    dispatched: bool = False
    arrived: bool = False
    arrival_s: float = math.nan
    link: int = -1
    pos_m: float = 0.0
    speed: float = 0.0
    lane_formed: bool = False
    formed_throughout: bool = True
    links_traversed: list[int] = field(default_factory=list)
    lanes_formed_count: int = 0

    @property
    def active(self) -> bool:
        return self.dispatched and not self.arrived


@dataclass(slots=True)
class Metrics:
    t_emv_s: float | None
    t_avg_s: float | None
    emergency_lanes_formed: int
    completed_trips: int
    spawned: int
    in_network: int
    pending: int
    emv_arrived: bool


@dataclass(slots=True)
class _FlowRuntime:
    spec: FlowSpec
    acc: float = 0.0
    rate_multiplier: float = 1.0  # entry lanes served by this row
    route: tuple[int, ...] | None = None  # fixed-OD rows only
    pending: deque = field(default_factory=deque)


class Sim:
    """One episode's mutable traffic state.  Owned by a single caller.

    `emv_route_fn(node) -> link id` supplies the emergency vehicle's
    next link whenever it is about to leave `node`; the episode driver
    wires this to whichever guidance scheme is under test.
    """

    def __init__(
        self,
        scenario: Scenario,
        net: Network,
        rng: np.random.Generator,
        emv_route_fn: Callable[[int], int] | None = None,
        record_events: bool = False,
    ):
        self.scenario = scenario
        self.net = net
        self.rng = rng
        self.emv_route_fn = emv_route_fn
        self.record_events = record_events
        self.events: list[EventRow] = []

        self.clock = 0.0
        self.sub_step_s = scenario.sim.sub_step_s
        self.sub_steps = int(round(scenario.sim.mdp_step_s / scenario.sim.sub_step_s))
        self.saturation = scenario.sim.saturation_discharge_veh_s

        self.lane_queues: list[list[deque[Vehicle]]] = [
            [deque() for _ in range(lk.lane_count)] for lk in net.links
        ]
        self.link_count: list[int] = [0] * len(net.links)  # non-EMV per link
        self.lane_acc: list[list[float]] = [
            [0.0] * lk.lane_count for lk in net.links
        ]
        self.active_phase: list[int] = [0] * net.n_nodes

        self.n_entered = 0
        self.n_completed = 0
        self.trip_time_sum = 0.0
        self._next_vid = 0
        self._route_cache: dict[tuple[int, int], tuple[int, ...]] = {}
        self._border = border_nodes(net)
        self._link_lengths = np.array([lk.length_m for lk in net.links])

        self.flows = [self._make_flow_runtime(f) for f in scenario.flows]
        self.emv = EmvState(
            scenario.emv.origin, scenario.emv.destination, scenario.emv.dispatch_s
        )

        # (node, phase idx) -> {incoming LaneRef -> set of permitted out links}
        self._permitted: list[list[dict[LaneRef, set[int]]]] = []
        for node in net.intersections:
            per_phase = []
            for phase in node.phases:
                table: dict[LaneRef, set[int]] = {}
                for m in phase.movements:
                    table.setdefault(m.from_lane, set()).add(m.to_lane.link)
                per_phase.append(table)
            self._permitted.append(per_phase)
        self._eligible_cache: dict[tuple[int, int | None], tuple[int, ...]] = {}

    # -- occupancy views ----------------------------------------------

    def lane_occupancy(self, lane: LaneRef) -> float:
        """x(l) as seen by pressure and observations (EMV on lane 0)."""
        n = len(self.lane_queues[lane.link][lane.lane])
        if lane.lane == 0 and self.emv.active and self.emv.link == lane.link:
            n += 1
        return float(n)

    def link_occupancy(self, link: int) -> float:
        n = self.link_count[link]
        if self.emv.active and self.emv.link == link:
            n += 1
        return float(n)

    def avg_speed(self, link: int) -> float:
        """Mean non-EMV speed: queued = 0, traversing = free flow."""
        lk = self.net.links[link]
        n = self.link_count[link]
        if n == 0:
            return lk.free_flow_speed
        moving = 0
        for q in self.lane_queues[link]:
            for veh in q:
                if veh.ready_s > self.clock:
                    moving += 1
        return moving * lk.free_flow_speed / n

    def emv_link_speed(self, link: int) -> tuple[float, bool]:
        lk = self.net.links[link]
        return emv_speed(
            self.link_count[link],
            lk.capacity,
            lk.lane_count,
            lk.emergency_capacity,
            self.avg_speed(link),
            lk.emv_free_flow_speed,
        )

    def emv_travel_times(self) -> np.ndarray:
        """Per-link EMV traversal times under current occupancy, clamped."""
        times = np.empty(len(self.net.links))
        for i in range(len(self.net.links)):
            speed, _ = self.emv_link_speed(i)
            times[i] = intra_link_travel_time(self._link_lengths[i], speed)
        return times

    # -- stepping -------------------------------------------------------

    def step(self, phase_actions: list[int]) -> list[EventRow]:
        """Advance one control interval; phases held constant throughout."""
        if len(phase_actions) != self.net.n_nodes:
            raise ValueError("one phase action per intersection required")
        for i, a in enumerate(phase_actions):
            if not 0 <= a < len(self.net.intersections[i].phases):
                raise ValueError(f"intersection {i}: invalid phase {a}")
        self.active_phase = list(phase_actions)
        mark = len(self.events)
        for _ in range(self.sub_steps):
            self._sub_step()
        return self.events[mark:]

    def _sub_step(self) -> None:
        dt = self.sub_step_s
        if not self.emv.dispatched and self.clock >= self.emv.dispatch_s:
            self._dispatch_emv()
        for node in self.net.intersections:
            self._discharge_node(node.index, dt)
        self._move_emv(dt)
        self._spawn(dt)
        self.clock += dt

    # -- discharge ------------------------------------------------------

    def _discharge_node(self, node_id: int, dt: float) -> None:
        permitted = self._permitted[node_id][self.active_phase[node_id]]
        cap = max(1.0, self.saturation * dt)
        for lk_id in self.net.in_links(node_id):
            lanes = self.lane_queues[lk_id]
            for lane_idx in range(len(lanes)):
                ref = LaneRef(lk_id, lane_idx)
                queue = lanes[lane_idx]
                greens = permitted.get(ref)
                exiting = bool(
                    queue
                    and queue[0].route_pos + 1 == len(queue[0].route) - 1
                    and queue[0].ready_s <= self.clock
                )
                if not greens and not exiting:
                    self.lane_acc[lk_id][lane_idx] = 0.0
                    continue
                acc = min(self.lane_acc[lk_id][lane_idx] + self.saturation * dt, cap)
                while acc >= 1.0 and queue:
                    veh = queue[0]
                    if veh.ready_s > self.clock:
                        break
                    if veh.route_pos + 1 == len(veh.route) - 1:
                        self._complete(queue, veh)
                        acc -= 1.0
                        continue
                    out_link = self.net.link_between(node_id, veh.route[veh.route_pos + 2])
                    if greens is None or out_link not in greens:
                        break
                    if not self._advance(queue, veh, out_link):
                        break
                    acc -= 1.0
                self.lane_acc[lk_id][lane_idx] = acc

    def _complete(self, queue: deque, veh: Vehicle) -> None:
        queue.popleft()
        self.link_count[veh.lane.link] -= 1
        self.n_completed += 1
        self.trip_time_sum += self.clock - veh.spawn_s
        self._event("complete", veh.vid, veh.lane)

    def _advance(self, queue: deque, veh: Vehicle, out_link: int) -> bool:
        """Move a queue head across the intersection; False if blocked."""
        nxt_pos = veh.route_pos + 1
        after = veh.route[nxt_pos + 2] if nxt_pos + 2 < len(veh.route) else None
        lane_idx = self._pick_lane(out_link, after)
        if lane_idx is None:
            return False
        queue.popleft()
        self.link_count[veh.lane.link] -= 1
        veh.route_pos = nxt_pos
        self._enter_link(veh, out_link, lane_idx)
        self._event("cross", veh.vid, veh.lane)
        return True

    def _enter_link(self, veh: Vehicle, link: int, lane_idx: int) -> None:
        lk = self.net.links[link]
        veh.lane = LaneRef(link, lane_idx)
        veh.ready_s = self.clock + lk.length_m / lk.free_flow_speed
        self.lane_queues[link][lane_idx].append(veh)
        self.link_count[link] += 1

    def _eligible_lanes(self, link: int, after_node: int | None) -> tuple[int, ...]:
        """Lanes of `link` a vehicle may take given its node after the head."""
        key = (link, after_node)
        got = self._eligible_cache.get(key)
        if got is not None:
            return got
        lk = self.net.links[link]
        if after_node is None:
            lanes = tuple(range(lk.lane_count))
        else:
            head = self.net.intersections[lk.head]
            port_of = {nbr: port for port, nbr in head.ports.items()}
            turn = (port_of[after_node] - port_of[lk.tail]) % 4
            lanes = tuple(
                i for i in range(lk.lane_count) if turn in lane_turns(i, lk.lane_count)
            )
        self._eligible_cache[key] = lanes
        return lanes

    def _pick_lane(self, link: int, after_node: int | None) -> int | None:
        """Least-occupied eligible lane with room, ties to lowest index."""
        cap = self.net.links[link].lane_capacity
        best, best_n = None, cap
        for i in self._eligible_lanes(link, after_node):
            n = len(self.lane_queues[link][i])
            if n < best_n:
                best, best_n = i, n
        return best

    # -- emergency vehicle ------------------------------------------------

    def _move_emv(self, dt: float) -> None:
        emv = self.emv
        if not emv.active:
            return
        remaining = dt
        while remaining > 1e-12:
            lk = self.net.links[emv.link]
            if emv.pos_m >= lk.length_m - 1e-9:
                if not self._emv_cross(dt - remaining):
                    break
                continue
            speed, formed = self.emv_link_speed(emv.link)
            emv.speed = speed
            emv.lane_formed = formed
            emv.formed_throughout = emv.formed_throughout and formed
            if speed <= 0.0:
                break
            to_end = (lk.length_m - emv.pos_m) / speed
            if to_end > remaining:
                emv.pos_m += speed * remaining
                remaining = 0.0
            else:
                emv.pos_m = lk.length_m
                remaining -= to_end

    def _emv_cross(self, elapsed_in_step: float) -> bool:
        """Attempt to move the EMV through the head intersection."""
        emv = self.emv
        lk = self.net.links[emv.link]
        node = lk.head
        if node == emv.destination:
            emv.arrived = True
            emv.arrival_s = self.clock + elapsed_in_step
            if emv.formed_throughout:
                emv.lanes_formed_count += 1
            self._event("emv_arrive", EMV_ID, LaneRef(emv.link, 0))
            return False
        nxt_link = self.emv_route_fn(node) if self.emv_route_fn else None
        if nxt_link is None:
            return False
        permitted = self._permitted[node][self.active_phase[node]]
        if not any(
            ref.link == emv.link and nxt_link in outs for ref, outs in permitted.items()
        ):
            return False  # red for this movement; hold at the stop line
        if emv.formed_throughout:
            emv.lanes_formed_count += 1
        emv.link = nxt_link
        emv.pos_m = 0.0
        emv.formed_throughout = True
        emv.links_traversed.append(nxt_link)
        self._event("emv_cross", EMV_ID, LaneRef(nxt_link, 0))
        return True

    def _dispatch_emv(self) -> None:
        emv = self.emv
        first = self.emv_route_fn(emv.origin) if self.emv_route_fn else None
        if first is None:
            raise RuntimeError("no route for emergency vehicle at dispatch")
        emv.dispatched = True
        emv.link = first
        emv.pos_m = 0.0
        emv.formed_throughout = True
        emv.links_traversed.append(first)
        self._event("emv_dispatch", EMV_ID, LaneRef(first, 0))

    # -- spawning --------------------------------------------------------

    def _make_flow_runtime(self, spec: FlowSpec) -> _FlowRuntime:
        rt = _FlowRuntime(spec=spec)
        if spec.random_od:
            rt.rate_multiplier = float(
                sum(
                    max(self.net.links[lk].lane_count for lk in self.net.out_links(b))
                    for b in self._border
                )
            )
        else:
            rt.route = self._od_route(spec.origin, spec.destination)
            first = self.net.link_between(rt.route[0], rt.route[1])
            rt.rate_multiplier = float(self.net.links[first].lane_count)
        return rt

    def _od_route(self, origin: int, destination: int) -> tuple[int, ...]:
        key = (origin, destination)
        got = self._route_cache.get(key)
        if got is None:
            got = tuple(a_star_route(self.net, self._link_lengths, origin, destination))
            self._route_cache[key] = got
        return got

    def _spawn(self, dt: float) -> None:
        for flow in self.flows:
            spec = flow.spec
            if spec.start_s <= self.clock < spec.end_s:
                flow.acc += spec.rate_veh_per_lane_hr * flow.rate_multiplier * dt / 3600.0
                while flow.acc >= 1.0:
                    flow.acc -= 1.0
                    flow.pending.append(self._draw_vehicle(flow))
            while flow.pending and self._try_enter(flow.pending[0]):
                flow.pending.popleft()

    def _draw_vehicle(self, flow: _FlowRuntime) -> Vehicle:
        if flow.spec.random_od:
            o = self._border[int(self.rng.integers(len(self._border)))]
            rest = [b for b in self._border if b != o]
            d = rest[int(self.rng.integers(len(rest)))]
            route = self._od_route(o, d)
        else:
            route = flow.route
        veh = Vehicle(vid=self._next_vid, route=route, spawn_s=self.clock)
        self._next_vid += 1
        return veh

    def _try_enter(self, veh: Vehicle) -> bool:
        link = self.net.link_between(veh.route[0], veh.route[1])
        after = veh.route[2] if len(veh.route) > 2 else None
        lane_idx = self._pick_lane(link, after)
        if lane_idx is None:
            return False
        veh.spawn_s = self.clock  # trip time starts when it actually enters
        self._enter_link(veh, link, lane_idx)
        self.n_entered += 1
        self._event("spawn", veh.vid, veh.lane)
        return True

    # -- accounting -------------------------------------------------------

    def in_network(self) -> int:
        return sum(self.link_count)

    def pending_count(self) -> int:
        return sum(len(f.pending) for f in self.flows)

    def check_conservation(self) -> None:
        in_net = self.in_network()
        if self.n_entered != self.n_completed + in_net:
            raise AssertionError(
                f"conservation broken: entered {self.n_entered} != "
                f"completed {self.n_completed} + in-network {in_net}"
            )

    def metrics(self) -> Metrics:
        emv = self.emv
        t_emv = emv.arrival_s - emv.dispatch_s if emv.arrived else None
        t_avg = self.trip_time_sum / self.n_completed if self.n_completed else None
        return Metrics(
            t_emv_s=t_emv,
            t_avg_s=t_avg,
            emergency_lanes_formed=emv.lanes_formed_count,
            completed_trips=self.n_completed,
            spawned=self.n_entered,
            in_network=self.in_network(),
            pending=self.pending_count(),
            emv_arrived=emv.arrived,
        )

    def _event(self, kind: str, vid: int, lane: LaneRef | None) -> None:
        if self.record_events:
            where = f"{lane.link}:{lane.lane}" if lane else ""
            self.events.append((self.clock, kind, vid, where))
