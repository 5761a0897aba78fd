"""Non-learning signal controllers and the benchmark combo matrix.

Controllers implement ``reset(env)`` / ``actions(env) -> [phase]``:

* fixed time: cyclic rotation with a per-intersection random offset,
* max pressure: per-step argmax of phase pressure (ties to phase 0),
* green-wave pre-emption overlay: while the emergency vehicle is on a
  link, its head intersection is overridden with the lowest-index phase
  that lets the vehicle's movement through, on top of either base
  controller, held until the vehicle exits the link.

The benchmark matrix crosses the overlay with static/dynamic route
guidance and both base controllers, plus a no-emergency fixed-time
reference and the trained-policy entry.
"""

from __future__ import annotations

import numpy as np

from .env import TrafficEnv
from .net import Network
from .pressure import max_pressure_phase
from .scenario import Scenario

COMBOS = (
    "ft_no_emv",
    "w_static_ft",
    "w_static_mp",
    "w_dynamic_ft",
    "w_dynamic_mp",
    "rl",
)


class FixedTimeController:
    """Phases rotate on a fixed split; offsets drawn once per run."""

    def __init__(self, net: Network, split_s: float, rng: np.random.Generator):
        self.split = split_s
        self.offsets = [
            int(rng.integers(0, max(1, round(len(node.phases) * split_s))))
            for node in net.intersections
        ]

    @staticmethod
    def phase_at(clock_s: float, offset_s: float, split_s: float, n_phases: int) -> int:
        return int((clock_s + offset_s) // split_s) % n_phases

    def reset(self, env: TrafficEnv) -> None:
        pass

    def actions(self, env: TrafficEnv) -> list[int]:
        t = env.sim.clock
        return [
            self.phase_at(t, self.offsets[node.index], self.split, len(node.phases))
            for node in env.net.intersections
        ]


class MaxPressureController:
    def reset(self, env: TrafficEnv) -> None:
        pass

    def actions(self, env: TrafficEnv) -> list[int]:
        sim = env.sim
        return [
            max_pressure_phase(env.net, sim.lane_occupancy, i)
            for i in range(env.net.n_nodes)
        ]


class GreenWaveController:
    """Pre-emption overlay: clear the EMV's next crossing, else defer."""

    def __init__(self, base):
        self.base = base

    def reset(self, env: TrafficEnv) -> None:
        self.base.reset(env)

    def actions(self, env: TrafficEnv) -> list[int]:
        acts = self.base.actions(env)
        emv = env.sim.emv
        if not emv.active:
            return acts
        head = env.net.links[emv.link].head
        nxt = env.emv_planned_next_link()
        if nxt is None:
            return acts
        for phase in env.net.intersections[head].phases:
            if (emv.link, nxt) in phase.link_pairs():
                acts[head] = phase.index
                break
        return acts


def build_benchmark(
    combo: str,
    scenario: Scenario,
    net: Network,
    rng: np.random.Generator,
    policy_controller=None,
):
    """(env, controller) for one benchmark combo."""
    if combo not in COMBOS:
        raise ValueError(f"unknown combo {combo!r}; valid: {', '.join(COMBOS)}")
    split = scenario.sim.fixed_time_split_s
    if combo == "ft_no_emv":
        env = TrafficEnv(scenario, net, rng, router="static", disable_emv=True)
        return env, FixedTimeController(net, split, rng)
    if combo == "rl":
        if policy_controller is None:
            raise ValueError("combo 'rl' needs a trained checkpoint")
        env = TrafficEnv(scenario, net, rng, router="relaxation")
        return env, policy_controller
    router = "static" if "static" in combo else "dynamic"
    env = TrafficEnv(scenario, net, rng, router=router)
    base = (
        FixedTimeController(net, split, rng)
        if combo.endswith("_ft")
        else MaxPressureController()
    )
    return env, GreenWaveController(base)
