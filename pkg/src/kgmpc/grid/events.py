"""Timed topology/shunt events and the two benchmark fault scripts."""

from __future__ import annotations

from dataclasses import dataclass, replace

from ..errors import EventError
from .model import GridModel

KINDS = ("apply_bus_fault", "clear_bus_fault", "trip_branch", "reclose_branch", "set_injection")

# 6 cycles at 60 Hz
CLEARING_DELAY = 0.1


@dataclass(frozen=True)
class Event:
    time: float
    kind: str
    bus: int | None = None
    branch: str | None = None
    value: complex | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise EventError(f"unknown event kind {self.kind!r}")

    def describe(self) -> str:
        target = self.branch if self.branch is not None else self.bus
        value = "" if self.value is None else f":{self.value!r}"
        return f"{self.time!r}:{self.kind}:{target}{value}"


def check_events(events) -> None:
    times = [ev.time for ev in events]
    if times != sorted(times):
        raise EventError("events must be sorted by time")


def apply_event(model: GridModel, ev: Event) -> tuple[GridModel, bool]:
    if ev.kind == "apply_bus_fault":
        y = model.fault_admittance if ev.value is None else complex(ev.value)
        if any(bus == ev.bus for bus, _ in model.faults):
            raise EventError(f"bus {ev.bus} is already faulted")
        if ev.bus not in model.bus_index:
            raise EventError(f"fault at unknown bus {ev.bus}")
        return replace(model, faults=model.faults + ((ev.bus, y),)), True
    if ev.kind == "clear_bus_fault":
        remaining = tuple(f for f in model.faults if f[0] != ev.bus)
        if len(remaining) == len(model.faults):
            raise EventError(f"no fault to clear at bus {ev.bus}")
        return replace(model, faults=remaining), True
    if ev.kind in ("trip_branch", "reclose_branch"):
        try:
            br = model.branch(ev.branch)
        except KeyError:
            raise EventError(f"unknown branch {ev.branch!r}") from None
        closing = ev.kind == "reclose_branch"
        if br.in_service == closing:
            state = "in service" if closing else "already open"
            raise EventError(f"branch {ev.branch} is {state}")
        return model.with_branch_status(ev.branch, closing), True
    # set_injection: constant-power term at a retained bus, no rebuild needed
    if ev.bus not in model.retained:
        raise EventError(f"injection bus {ev.bus} is not retained")
    others = tuple(item for item in model.injections if item[0] != ev.bus)
    return replace(model, injections=others + ((ev.bus, complex(ev.value or 0)),)), False


def apply_events(model: GridModel, events, t_prev: float, t_now: float, *, eps=1e-9):
    """Apply every event with ``t_prev < time <= t_now`` in order.

    Returns the updated model and whether the admittance data changed.
    """
    rebuild = False
    for ev in events:
        if t_prev + eps < ev.time <= t_now + eps:
            model, changed = apply_event(model, ev)
            rebuild |= changed
    return model, rebuild


def fault_script(name: str, *, t_fault: float = 2.0, t_reclose: float = 5.0, y_fault=None):
    """Event list for a named benchmark fault.

    ``fault1``: three-phase fault at bus 7, line 7-8 opened six cycles later,
    reclosed at ``t_reclose``. ``fault2``: same timing at bus 9, opening the
    bus-9 end of the tie (circuit ``8-9``).
    """
    if name == "none":
        return []
    targets = {"fault1": (7, "7-8"), "fault2": (9, "8-9")}
    if name not in targets:
        raise EventError(f"unknown fault script {name!r}")
    bus, line = targets[name]
    t_clear = t_fault + CLEARING_DELAY
    return [
        Event(t_fault, "apply_bus_fault", bus=bus, value=y_fault),
        Event(t_clear, "clear_bus_fault", bus=bus),
        Event(t_clear, "trip_branch", branch=line),
        Event(t_reclose, "reclose_branch", branch=line),
    ]


def post_fault_topology(model: GridModel, topology: str) -> GridModel:
    """Model with the line opened by a fault script (``intact`` leaves it)."""
    if topology in ("intact", "none"):
        return model
    lines = {"fault1": "7-8", "fault2": "8-9"}
    if topology in lines:
        return model.with_branch_status(lines[topology], False)
    if topology.startswith("open:"):
        return model.with_branch_status(topology[5:], False)
    raise EventError(f"unknown topology id {topology!r}")
