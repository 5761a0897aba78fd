"""Per-intersection agents: roles, observations, and rewards.

While the emergency vehicle is active, the head intersection of its
current link is the *primary* agent, the primary's table-recommended
next hop is the *secondary* agent, and everyone else is *normal*.
Rewards are nonpositive for every role: normal agents pay their own
intersection pressure, the secondary pays a blend of its pressure and
the occupancy of the link the emergency vehicle will use next, and the
primary pays a flat unit penalty per step (so shortening its tenure is
the only way to reduce that cost).

Observations concatenate, per intersection: incoming lane densities,
outgoing lane densities, the emergency vehicle's remaining distance on
each incoming link (normalized by link length, -1 everywhere except the
primary's carrying link), and the routing pair (eta, next hop) from the
table snapshot frozen at the vehicle's last half-link crossing.  Joint
observations append each port neighbor's block scaled by the spatial
discount factor so far-away traffic weighs less.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np

from .net import UNREACHABLE, Network
from .pressure import (
    intersection_pressure,
    intersection_pressure_signed,
    lane_density,
)
from .routing import NO_NEXT, EtaTable
from .sim import Sim


class Role(IntEnum):
    NORMAL = 0
    PRIMARY = 1
    SECONDARY = 2


def classify_roles(sim: Sim, table: EtaTable | None) -> tuple[int | None, int | None]:
    """(primary id, secondary id); (None, None) while no EMV is active."""
    emv = sim.emv
    if not emv.active or table is None:
        return None, None
    primary = sim.net.links[emv.link].head
    if primary == table.destination:
        return primary, None
    nxt = int(table.next_hop[primary])
    return primary, (nxt if nxt != NO_NEXT else None)


def role_vector(net: Network, primary: int | None, secondary: int | None) -> list[Role]:
    roles = [Role.NORMAL] * net.n_nodes
    if primary is not None:
        roles[primary] = Role.PRIMARY
    if secondary is not None:
        roles[secondary] = Role.SECONDARY
    return roles


# -- observations ------------------------------------------------------


def own_obs_dim(net: Network, i: int) -> int:
    node = net.intersections[i]
    in_lanes = sum(net.links[lk].lane_count for lk in node.in_links)
    out_lanes = sum(net.links[lk].lane_count for lk in node.out_links)
    return in_lanes + out_lanes + len(node.in_links) + 2


def joint_obs_dim(net: Network, i: int) -> int:
    node = net.intersections[i]
    return own_obs_dim(net, i) + sum(own_obs_dim(net, j) for j in node.neighbors)


def _own_obs(sim: Sim, table: EtaTable | None, horizon_s: float, i: int) -> np.ndarray:
    net = sim.net
    node = net.intersections[i]
    emv = sim.emv
    parts: list[float] = []
    for lk_id in node.in_links:
        for lane in net.links[lk_id].lanes():
            parts.append(lane_density(net, sim.lane_occupancy, lane))
    for lk_id in node.out_links:
        for lane in net.links[lk_id].lanes():
            parts.append(lane_density(net, sim.lane_occupancy, lane))
    for lk_id in node.in_links:
        if emv.active and emv.link == lk_id:
            lk = net.links[lk_id]
            parts.append((lk.length_m - emv.pos_m) / lk.length_m)
        else:
            parts.append(-1.0)
    if table is None:
        parts.extend((-1.0, -1.0))
    else:
        eta = float(table.eta[i])
        parts.append(eta / horizon_s if np.isfinite(eta) else -1.0)
        nxt = int(table.next_hop[i])
        if nxt == NO_NEXT:
            parts.append(-1.0)
        else:
            port = next(p for p, nbr in node.ports.items() if nbr == nxt)
            parts.append(port / 3.0)
    return np.array(parts)


def observe_all(
    sim: Sim, table: EtaTable | None, horizon_s: float, alpha: float
) -> list[np.ndarray]:
    """Joint observation per agent: own block + alpha-scaled neighbors."""
    net = sim.net
    own = [_own_obs(sim, table, horizon_s, i) for i in range(net.n_nodes)]
    joint = []
    for node in net.intersections:
        blocks = [own[node.index]]
        blocks.extend(alpha * own[j] for j in node.neighbors)
        joint.append(np.concatenate(blocks))
    return joint


# -- rewards -----------------------------------------------------------


def local_rewards(
    sim: Sim,
    primary: int | None,
    secondary: int | None,
    *,
    beta: float = 0.5,
    presslight: bool = False,
    no_primary: bool = False,
    no_secondary: bool = False,
) -> np.ndarray:
    """Eq.-style local reward per agent; every entry is <= 0.

    `presslight` swaps the averaged pressure for the signed-aggregate
    variant; `no_primary` / `no_secondary` demote those roles to the
    normal reward (reward-level ablations; observations are untouched).
    """
    net = sim.net
    pressure_fn = intersection_pressure_signed if presslight else intersection_pressure
    out = np.empty(net.n_nodes)
    if no_primary:
        primary_rw = None
    else:
        primary_rw = primary
    if no_secondary or primary is None:
        secondary_rw = None
    else:
        secondary_rw = secondary
    for i in range(net.n_nodes):
        if i == primary_rw:
            out[i] = -1.0
        elif i == secondary_rw:
            p = pressure_fn(net, sim.lane_occupancy, i)
            link = net.link_between(primary, i)
            lanes = net.links[link].lanes()
            occ = sum(lane_density(net, sim.lane_occupancy, ln) for ln in lanes) / len(lanes)
            out[i] = -beta * p - (1.0 - beta) * occ
        else:
            out[i] = -pressure_fn(net, sim.lane_occupancy, i)
    return out


def spatial_weight_matrix(net: Network, alpha: float) -> np.ndarray:
    """W[i, j] = alpha^graph_distance(i, j); unreachable pairs weigh 0."""
    n = net.n_nodes
    W = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            d = net.graph_distance(i, j)
            if d != UNREACHABLE:
                W[i, j] = alpha**d
    return W


def adjusted_rewards(weights: np.ndarray, rewards: np.ndarray) -> np.ndarray:
    """Spatially discounted rewards: one row-weighted sum per agent."""
    return weights @ rewards
