"""Traffic-network simulation with decentralized signal control and
emergency-vehicle routing.

The package couples a mesoscopic grid simulator with cooperating per-agent
actor-critic controllers: the intersection currently carrying an emergency
vehicle and the one it will reach next coordinate to flush a clear lane ahead
of it, while every other agent keeps ordinary traffic moving via pressure
minimization.  Routing and control share one clock, so the route adapts to
what the signals do and vice versa.
"""

from __future__ import annotations

from .net import Network, build_grid
from .scenario import Scenario, load_scenario, resolve_scenario

__version__ = "0.1.0"

__all__ = [
    "Network",
    "Scenario",
    "build_grid",
    "load_scenario",
    "resolve_scenario",
    "__version__",
]
