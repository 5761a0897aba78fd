"""Pressure quantities driving rewards and the max-pressure controller.

All quantities are functions of lane occupancy densities.  Two families
live here:

* the *averaged* lane pressure ``w(l)`` and its intersection mean
  ``P_i`` (used by agent rewards), where each downstream lane's density
  is weighted by one over its link's lane count, and
* a *signed per-movement* variant ``w*(l, m) = density(l) - density(m)``
  whose intersection aggregate ``P*_i`` and per-phase sums feed the
  pressure-ablation reward and the max-pressure baseline.

Occupancy is supplied as a callable ``lane_count(LaneRef) -> float`` so
callers decide what counts as a vehicle (the simulator includes an
active emergency vehicle on its link).
"""

from __future__ import annotations

from typing import Callable

from .net import Intersection, LaneRef, Network, Phase

LaneCount = Callable[[LaneRef], float]


def lane_density(net: Network, counts: LaneCount, lane: LaneRef) -> float:
    return counts(lane) / net.links[lane.link].lane_capacity


def lane_pressure(net: Network, counts: LaneCount, lane: LaneRef) -> float:
    """w(l): absolute imbalance between lane l and its downstream lanes.

    Downstream lanes are every lane reachable from l by one movement;
    each contributes its density divided by its link's lane count.
    """
    node = net.intersections[net.links[lane.link].head]
    downstream = 0.0
    for m in node.movements:
        if m.from_lane == lane:
            h = net.links[m.to_lane.link].lane_count
            downstream += lane_density(net, counts, m.to_lane) / h
    return abs(lane_density(net, counts, lane) - downstream)


def incoming_lanes(net: Network, node: Intersection) -> list[LaneRef]:
    return [lane for lk in node.in_links for lane in net.links[lk].lanes()]


def intersection_pressure(net: Network, counts: LaneCount, node_id: int) -> float:
    """P_i: mean of w(l) over the intersection's incoming lanes."""
    node = net.intersections[node_id]
    lanes = incoming_lanes(net, node)
    if not lanes:
        return 0.0
    return sum(lane_pressure(net, counts, lane) for lane in lanes) / len(lanes)


def movement_pressure(net: Network, counts: LaneCount, from_lane: LaneRef, to_lane: LaneRef) -> float:
    """w*(l, m): signed density difference across one movement."""
    return lane_density(net, counts, from_lane) - lane_density(net, counts, to_lane)


def intersection_pressure_signed(net: Network, counts: LaneCount, node_id: int) -> float:
    """P*_i: absolute value of the summed signed movement pressures."""
    node = net.intersections[node_id]
    total = sum(
        movement_pressure(net, counts, m.from_lane, m.to_lane) for m in node.movements
    )
    return abs(total)


def phase_pressure(net: Network, counts: LaneCount, phase: Phase) -> float:
    """Signed sum of w* over the phase's movements (max-pressure score)."""
    return sum(
        movement_pressure(net, counts, m.from_lane, m.to_lane) for m in phase.movements
    )


def max_pressure_phase(net: Network, counts: LaneCount, node_id: int) -> int:
    """Index of the phase with the largest pressure; ties to lowest index."""
    node = net.intersections[node_id]
    best, best_score = 0, float("-inf")
    for phase in node.phases:
        score = phase_pressure(net, counts, phase)
        if score > best_score:
            best, best_score = phase.index, score
    return best
