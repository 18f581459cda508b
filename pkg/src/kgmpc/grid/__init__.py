"""Classical-model multi-machine grid: network reduction, events, simulation."""

from .events import Event, apply_events, fault_script, post_fault_topology
from .model import Branch, Bus, GridModel, GridState, Load, Machine
from .network import ReducedNetwork, build_reduced_network, electrical_power, kron_reduce, solve_network
from .simulate import (
    FrequencyMeter,
    GridSimulator,
    measure_bus_frequency,
    solve_equilibrium,
    step_grid,
    swing_derivatives,
)

__all__ = [
    "Branch", "Bus", "Event", "FrequencyMeter", "GridModel", "GridSimulator", "GridState",
    "Load", "Machine", "ReducedNetwork", "apply_events", "build_reduced_network",
    "electrical_power", "fault_script", "kron_reduce", "measure_bus_frequency",
    "post_fault_topology", "solve_equilibrium", "solve_network", "step_grid", "swing_derivatives",
]
