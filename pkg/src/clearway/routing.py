"""Decentralized route guidance for the emergency vehicle.

The vehicle never holds a full route.  Each intersection keeps a pair
(ETA to the destination, best next hop); tables are seeded exactly with
a Dijkstra pass at dispatch and then kept fresh by one synchronous
relaxation sweep per control step:

    eta'[i] = min over out-links (i -> j) of  eta[j] + T[i -> j]

with the destination pinned at zero.  The sweep is double-buffered
(every read sees the previous iteration) and costs Theta(|E|) work per
round.

A table is *valid* when it is pointwise >= the true shortest-time fixed
point under the current travel times; any path-realizable table (costs
of actual paths, e.g. a stale Dijkstra result re-priced at today's
times) qualifies.  Valid tables reach the fixed point within |V|
sweeps.  Tables that underestimate through a stale cheap cycle hold no
such bound, so callers must only inject path-realizable values.

Travel times come from the emergency-vehicle speed model; a stationary
full link would give an infinite time, so per-link times are clamped.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .net import Network

#: per-link travel-time clamp when the link's average speed is zero
MAX_LINK_TIME_S = 600.0

NO_NEXT = -1


def intra_link_travel_time(length_m: float, speed_ms: float, max_time_s: float = MAX_LINK_TIME_S) -> float:
    """length / speed, clamped to max_time_s (covers speed = 0)."""
    if speed_ms <= 0.0:
        return max_time_s
    return min(length_m / speed_ms, max_time_s)


@dataclass(slots=True)
class EtaTable:
    """Snapshot of per-intersection (ETA, next hop) toward one destination.

    next_hop[destination] = NO_NEXT; next_hop[i] is an out-neighbor of i
    everywhere the destination is reachable.
    """

    eta: np.ndarray  # float64, seconds
    next_hop: np.ndarray  # int64 intersection ids, NO_NEXT at the destination
    destination: int

    def copy(self) -> "EtaTable":
        return EtaTable(self.eta.copy(), self.next_hop.copy(), self.destination)


def _derive_next(net: Network, eta: np.ndarray, T: np.ndarray, destination: int) -> np.ndarray:
    nxt = np.full(net.n_nodes, NO_NEXT, dtype=np.int64)
    for i in range(net.n_nodes):
        if i == destination:
            continue
        best = math.inf
        best_j = NO_NEXT
        for lk in net.out_links(i):
            j = net.links[lk].head
            cand = eta[j] + T[lk]
            if cand < best or (cand == best and j < best_j):
                best, best_j = cand, j
        if math.isfinite(best):
            nxt[i] = best_j
    return nxt


def prepopulate(net: Network, T: np.ndarray, destination: int) -> EtaTable:
    """Exact shortest-time table under T, built with a heap Dijkstra.

    Runs on the reversed graph from the destination: O(|V| log |V| + |E|)
    heap operations on these sizes.
    """
    eta = np.full(net.n_nodes, math.inf)
    eta[destination] = 0.0
    pq: list[tuple[float, int]] = [(0.0, destination)]
    done = [False] * net.n_nodes
    while pq:
        d, j = heapq.heappop(pq)
        if done[j]:
            continue
        done[j] = True
        for lk in net.in_links(j):  # relax upstream: i -> j
            i = net.links[lk].tail
            cand = d + T[lk]
            if cand < eta[i]:
                eta[i] = cand
                heapq.heappush(pq, (cand, i))
    return EtaTable(eta, _derive_next(net, eta, T, destination), destination)


def relax_step(net: Network, T: np.ndarray, table: EtaTable) -> EtaTable:
    """One synchronous (double-buffered) relaxation sweep. Theta(|E|)."""
    old = table.eta
    eta = np.full(net.n_nodes, math.inf)
    eta[table.destination] = 0.0
    for i in range(net.n_nodes):
        if i == table.destination:
            continue
        for lk in net.out_links(i):
            cand = old[net.links[lk].head] + T[lk]
            if cand < eta[i]:
                eta[i] = cand
    return EtaTable(eta, _derive_next(net, eta, T, table.destination), table.destination)


def next_hop(table: EtaTable, i: int) -> int:
    if i == table.destination:
        raise ValueError("next_hop undefined at the destination")
    return int(table.next_hop[i])


def manhattan_heuristic(net: Network, destination: int, cost: np.ndarray):
    """Admissible lower bound: Manhattan hop count times the cheapest link.

    Needs grid coordinates on every node; networks without geometry get
    the zero heuristic (plain Dijkstra behavior).
    """
    if any(n.pos is None for n in net.intersections) or len(cost) == 0:
        return lambda i: 0.0
    unit = float(np.min(cost))
    dest = net.intersections[destination].pos

    def h(i: int) -> float:
        pos = net.intersections[i].pos
        return (abs(pos[0] - dest[0]) + abs(pos[1] - dest[1])) * unit

    return h


def a_star_route(net: Network, cost: np.ndarray, origin: int, destination: int) -> list[int]:
    """Cheapest node path under per-link costs; A* with the Manhattan bound.

    Deterministic: among equal-cost optima it returns the
    lexicographically smallest node sequence.
    """
    if origin == destination:
        return [origin]
    h = manhattan_heuristic(net, destination, cost)
    start = (origin,)
    pq: list[tuple[float, tuple[int, ...]]] = [(h(origin), start)]
    g = {origin: 0.0}
    closed: set[int] = set()
    while pq:
        f, path = heapq.heappop(pq)
        u = path[-1]
        if u == destination:
            return list(path)
        if u in closed:
            continue
        closed.add(u)
        gu = f - h(u)
        for lk in net.out_links(u):
            v = net.links[lk].head
            if v in closed:
                continue
            gv = gu + cost[lk]
            if gv <= g.get(v, math.inf):  # <= keeps lexicographic candidates alive
                g[v] = gv
                heapq.heappush(pq, (gv + h(v), path + (v,)))
    raise ValueError(f"no route from {origin} to {destination}")


def route_links(net: Network, route: list[int]) -> list[int]:
    """Node path -> link id sequence; raises if an edge is missing."""
    links = []
    for a, b in zip(route, route[1:]):
        lk = net.link_between(a, b)
        if lk is None:
            raise ValueError(f"no link {a}->{b}")
        links.append(lk)
    return links
