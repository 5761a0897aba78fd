"""Episode driver: one simulator plus one route-guidance scheme.

Guidance kinds:

* ``relaxation`` - the decentralized table: exact Dijkstra prepopulation
  at dispatch, one double-buffered sweep per control step, and the
  half-link freeze (observations and the vehicle's own commitments read
  a snapshot taken when it passed the midpoint of its current link).
* ``static`` - one cheapest-time route fixed at dispatch.
* ``dynamic`` - cheapest-time route replanned on a fixed period,
  anchored at the vehicle's next intersection.

The control loop each step: callers read observations/roles, pick one
phase per intersection, `step` advances the simulator and then the
guidance state.  Rewards are evaluated on the post-step state, so a
primary agent stops paying its unit penalty on the step the vehicle
clears it.
"""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from .agents import classify_roles, local_rewards, observe_all
from .net import Network
from .routing import NO_NEXT, EtaTable, a_star_route, prepopulate, relax_step
from .scenario import EmvSpec, Scenario
from .sim import Metrics, Sim

REPLAN_PERIOD_S = 50.0

ROUTERS = ("relaxation", "static", "dynamic")


class TrafficEnv:
    def __init__(
        self,
        scenario: Scenario,
        net: Network,
        rng: np.random.Generator,
        *,
        router: str = "relaxation",
        disable_emv: bool = False,
        record_events: bool = False,
        record_route: bool = False,
        presslight: bool = False,
        no_primary: bool = False,
        no_secondary: bool = False,
    ):
        if router not in ROUTERS:
            raise ValueError(f"unknown router {router!r}")
        self.scenario = scenario
        self.net = net
        self.rng = rng
        self.router = router
        self.record_events = record_events
        self.record_route = record_route
        self.reward_flags = dict(
            presslight=presslight, no_primary=no_primary, no_secondary=no_secondary
        )
        self.horizon_steps = int(round(scenario.sim.horizon_s / scenario.sim.mdp_step_s))
        if disable_emv:
            emv = replace(scenario.emv, dispatch_s=math.inf)
            scenario = replace(scenario, emv=emv)
            self.scenario = scenario
        self.sim: Sim = None  # set by reset()
        self.reset()

    def reset(self) -> None:
        self.sim = Sim(
            self.scenario,
            self.net,
            self.rng,
            emv_route_fn=self._route_fn,
            record_events=self.record_events,
        )
        self.step_idx = 0
        self.live: EtaTable | None = None
        self.frozen: EtaTable | None = None
        self._half_frozen_link: int | None = None
        self._plan_next: dict[int, int] | None = None
        self._next_replan_s = math.inf
        self.route_rows: list[tuple[int, int, float, int]] = []

    # -- guidance ------------------------------------------------------

    def _ensure_tables(self) -> None:
        if self.live is None:
            T = self.sim.emv_travel_times()
            self.live = prepopulate(self.net, T, self.scenario.emv.destination)
            self.frozen = self.live

    def _make_plan(self, start: int) -> None:
        route = a_star_route(
            self.net, self.sim.emv_travel_times(), start, self.scenario.emv.destination
        )
        plan = dict(zip(route, route[1:]))
        if self._plan_next is None:
            self._plan_next = plan
        else:
            self._plan_next.update(plan)  # keep history for nodes already passed

    def _route_fn(self, node: int) -> int | None:
        """Next link for the EMV leaving `node`; consulted at crossings."""
        if self.router in ("static", "dynamic"):
            if self._plan_next is None:
                self._make_plan(node)
                if self.router == "dynamic":
                    self._next_replan_s = self.sim.clock + REPLAN_PERIOD_S
            nxt = self._plan_next.get(node)
            return None if nxt is None else self.net.link_between(node, nxt)
        self._ensure_tables()
        nxt = int(self.frozen.next_hop[node])
        emv = self.sim.emv
        back = self.net.links[emv.link].tail if emv.dispatched and emv.link >= 0 else None
        if nxt == NO_NEXT or nxt == back:
            # Stale tables can point back up the vehicle's own link; take
            # the best other neighbor instead (ties to the lowest id).
            best, best_eta = None, math.inf
            for lk in self.net.out_links(node):
                j = self.net.links[lk].head
                if j == back:
                    continue
                if self.frozen.eta[j] < best_eta:
                    best, best_eta = j, float(self.frozen.eta[j])
            nxt = best if best is not None else nxt
        if nxt == NO_NEXT or nxt is None:
            return None
        return self.net.link_between(node, nxt)

    def emv_planned_next_link(self) -> int | None:
        """Link the EMV intends to take at its upcoming intersection."""
        emv = self.sim.emv
        if not emv.active:
            return None
        head = self.net.links[emv.link].head
        if head == self.scenario.emv.destination:
            return None
        return self._route_fn(head)

    # -- control loop -----------------------------------------------------

    def step(self, actions: list[int]):
        events = self.sim.step(actions)
        self.step_idx += 1
        emv = self.sim.emv
        if emv.active:
            if self.router == "relaxation" and self.live is not None:
                T = self.sim.emv_travel_times()
                self.live = relax_step(self.net, T, self.live)
                lk = self.net.links[emv.link]
                if (
                    emv.pos_m / lk.length_m >= 0.5
                    and self._half_frozen_link != emv.link
                ):
                    self.frozen = self.live
                    self._half_frozen_link = emv.link
            elif self.router == "dynamic" and self.sim.clock >= self._next_replan_s:
                self._make_plan(self.net.links[emv.link].head)
                self._next_replan_s += REPLAN_PERIOD_S
        if self.record_route:
            self._log_route_row()
        return events

    def _log_route_row(self) -> None:
        emv = self.sim.emv
        if not emv.active:
            return
        head = self.net.links[emv.link].head
        if self.frozen is not None:
            eta = float(self.frozen.eta[head])
            nxt = int(self.frozen.next_hop[head])
        else:
            eta, nxt = math.nan, NO_NEXT
        self.route_rows.append((self.step_idx, emv.link, eta, nxt))

    # -- agent-facing views ------------------------------------------------

    def roles(self) -> tuple[int | None, int | None]:
        return classify_roles(self.sim, self.frozen)

    def observations(self) -> list[np.ndarray]:
        table = self.frozen if self.sim.emv.active else None
        return observe_all(
            self.sim,
            table,
            self.scenario.sim.horizon_s,
            self.scenario.train.spatial_alpha,
        )

    def rewards(self) -> np.ndarray:
        primary, secondary = self.roles()
        return local_rewards(
            self.sim,
            primary,
            secondary,
            beta=self.scenario.train.beta,
            **self.reward_flags,
        )

    def done(self) -> bool:
        return self.step_idx >= self.horizon_steps

    def metrics(self) -> Metrics:
        return self.sim.metrics()


def censored_t_emv(metrics: Metrics, scenario: Scenario) -> float:
    """T_EMV, or the worst case (horizon - dispatch) when it never arrived."""
    if metrics.t_emv_s is not None:
        return metrics.t_emv_s
    return scenario.sim.horizon_s - scenario.emv.dispatch_s


def run_episode(env: TrafficEnv, controller) -> Metrics:
    env.reset()
    controller.reset(env)
    while not env.done():
        env.step(controller.actions(env))
    return env.metrics()
