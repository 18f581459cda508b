"""Swing-equation integration, equilibrium solve and bus-frequency measurement."""

from __future__ import annotations

import math

import numpy as np
import scipy.optimize

from ..errors import ConvergenceError, DivergenceError
from .events import apply_events, check_events
from .model import GridModel, GridState
from .network import ReducedNetwork, build_reduced_network, machine_power, solve_network

GUARD_BAND = 0.2


def retained_injections(model: GridModel, net: ReducedNetwork, dsms_power=None, shape=()):
    """Complex power vector over retained buses (system base)."""
    s = np.zeros(tuple(shape) + (len(net.retained),), dtype=complex)
    for bus, value in model.injections:
        s[..., net.retained_index(bus)] += value
    if dsms_power is not None and model.dsms_bus is not None:
        s[..., net.retained_index(model.dsms_bus)] += dsms_power
    return s


def swing_derivatives(model: GridModel, net: ReducedNetwork, delta, domega, injections=None, on_fail="raise"):
    """Right-hand side of the classical swing equations.

    Returns ``(ddelta, ddomega, v_retained)``; speeds are pu deviations on
    ``omega0`` and the inertia/damping are on the system base.
    """
    e = model.emf * np.exp(1j * delta)
    v = solve_network(net, e, injections, on_fail=on_fail, v_low=model.pq_breakpoint)
    pe = machine_power(net, e, v)
    ddelta = model.omega0 * domega
    ddomega = (model.pm - pe - model.d_sys * domega) / (2.0 * model.h_sys)
    return ddelta, ddomega, v


def rk4_arrays(model, net, delta, domega, injections, dt, on_fail="raise"):
    k1d, k1w, _ = swing_derivatives(model, net, delta, domega, injections, on_fail)
    k2d, k2w, _ = swing_derivatives(model, net, delta + 0.5 * dt * k1d, domega + 0.5 * dt * k1w, injections, on_fail)
    k3d, k3w, _ = swing_derivatives(model, net, delta + 0.5 * dt * k2d, domega + 0.5 * dt * k2w, injections, on_fail)
    k4d, k4w, _ = swing_derivatives(model, net, delta + dt * k3d, domega + dt * k3w, injections, on_fail)
    delta = delta + dt / 6.0 * (k1d + 2.0 * k2d + 2.0 * k3d + k4d)
    domega = domega + dt / 6.0 * (k1w + 2.0 * k2w + 2.0 * k3w + k4w)
    e = model.emf * np.exp(1j * delta)
    v = solve_network(net, e, injections, on_fail=on_fail, v_low=model.pq_breakpoint)
    return delta, domega, v


def step_grid(state: GridState, model: GridModel, net: ReducedNetwork, injections, dt: float) -> GridState:
    """One fixed-step RK4 step; the network is re-solved at every stage."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    delta, domega, v = rk4_arrays(model, net, state.delta, state.domega, injections, dt)
    t = state.t + dt
    if not (np.all(np.isfinite(domega)) and np.all(np.abs(domega) < GUARD_BAND)):
        raise DivergenceError(f"speed deviation left the guard band at t={t:.4f} s", t)
    return GridState(delta, domega, t, v)


def solve_equilibrium(model: GridModel, net: ReducedNetwork | None = None, *, tol=1e-13):
    """Classical-model operating point with zero speed deviation.

    Angles of all machines except the slack are solved so that electrical
    output equals mechanical input; the slack angle is held at its guess.
    Mechanical powers are then reset to the solved electrical powers so the
    returned model is exactly stationary. Returns ``(model, state)``.
    """
    net = net or build_reduced_network(model)
    n = len(model.machines)
    guess = np.array([m.angle_guess for m in model.machines])
    free = [k for k in range(n) if k != model.slack]
    s0 = retained_injections(model, net)

    def pe_of(angles):
        e = model.emf * np.exp(1j * angles)
        return machine_power(net, e, solve_network(net, e, s0, v_low=model.pq_breakpoint))

    def residual(x):
        angles = guess.copy()
        angles[free] = x
        return (pe_of(angles) - model.pm)[free]

    sol = scipy.optimize.root(residual, guess[free], method="hybr", tol=tol)
    if not sol.success or np.max(np.abs(residual(sol.x))) > 1e-8:
        raise ConvergenceError(f"equilibrium solve failed: {sol.message}", float(np.max(np.abs(residual(sol.x)))))
    angles = guess.copy()
    angles[free] = sol.x
    pe = pe_of(angles)
    balanced = model.with_pm(pe)
    e = balanced.emf * np.exp(1j * angles)
    v = solve_network(net, e, s0, v_low=model.pq_breakpoint)
    return balanced, GridState(angles, np.zeros(n), 0.0, v)


def measure_bus_frequency(angles, ts: float, t_f: float = 0.05, omega0: float = 2 * math.pi * 60, initial: float = 0.0):
    """Filtered frequency deviation (pu) from a sampled bus-angle history.

    Backward differences of the unwrapped angle are scaled by ``1/omega0`` and
    passed through a discretised first-order lag with time constant ``t_f``
    (``t_f = 0`` bypasses the filter). One output per difference.
    """
    a = np.asarray(angles, dtype=float)
    if a.shape[0] < 2:
        raise ValueError("need at least two angle samples")
    raw = np.angle(np.exp(1j * np.diff(a, axis=0))) / (ts * omega0)
    if t_f <= 0:
        return raw
    alpha = math.exp(-ts / t_f)
    out = np.empty_like(raw)
    y = initial
    for k in range(raw.shape[0]):
        y = alpha * y + (1.0 - alpha) * raw[k]
        out[k] = y
    return out


class FrequencyMeter:
    """Streaming version of :func:`measure_bus_frequency` at the integration step."""

    def __init__(self, dt, t_f=0.05, omega0=2 * math.pi * 60):
        self.dt = dt
        self.omega0 = omega0
        self.alpha = math.exp(-dt / t_f) if t_f > 0 else 0.0
        self.angle = None
        self.value = None

    def reset(self, angle, value):
        self.angle = np.array(angle, dtype=float)
        self.value = np.array(value, dtype=float)

    def update(self, angle):
        angle = np.asarray(angle, dtype=float)
        raw = np.angle(np.exp(1j * (angle - self.angle))) / (self.dt * self.omega0)
        self.value = self.alpha * self.value + (1.0 - self.alpha) * raw
        self.angle = angle
        return self.value


class GridSimulator:
    """Fixed-step simulation of a (batch of) classical grid(s) with events.

    ``on_divergence='raise'`` raises :class:`DivergenceError`; ``'flag'`` freezes
    the offending batch members and marks them in :attr:`diverged`.
    """

    def __init__(self, model: GridModel, state: GridState, *, dt=1e-3, events=(),
                 t_f=0.05, freq_mode="bus", on_divergence="raise"):
        events = list(events)
        check_events(events)
        self.model = model
        self.events = events
        self.dt = dt
        self.net = build_reduced_network(model)
        self.freq_mode = freq_mode
        self.on_divergence = on_divergence
        self.applied_events: list[str] = []
        self.rebuilds = 0
        self._step = 0
        self._t0 = state.t
        self._t_prev = -math.inf
        self.state = state.copy()
        shape = np.shape(state.delta)[:-1]
        self.diverged = np.zeros(shape, dtype=bool)
        self.diverged_at = np.full(shape, np.nan)
        self.meter = FrequencyMeter(dt, t_f, model.omega0)
        self._apply_pending(self.state.t)
        self._dsms_power = np.zeros(shape, dtype=complex)
        s = self._injections()
        e = model.emf * np.exp(1j * self.state.delta)
        self.state.v_retained = solve_network(self.net, e, s, v_low=self.model.pq_breakpoint)
        self.meter.reset(self._bus_angle(self.state.v_retained), self._initial_frequency(s))

    @property
    def t(self) -> float:
        return self.state.t

    def _bus_index(self):
        return self.net.retained_index(self.model.dsms_bus) if self.model.dsms_bus is not None else 0

    def _bus_angle(self, v):
        return np.angle(v[..., self._bus_index()])

    def _nearest_machine(self):
        return int(np.argmax(np.abs(self.net.ymr[:, self._bus_index()])))

    def _initial_frequency(self, s):
        h = 1e-6
        st = self.state
        e1 = self.model.emf * np.exp(1j * (st.delta + h * self.model.omega0 * st.domega))
        v1 = solve_network(self.net, e1, s, v_low=self.model.pq_breakpoint)
        dtheta = np.angle(np.exp(1j * (self._bus_angle(v1) - self._bus_angle(st.v_retained))))
        return dtheta / (h * self.model.omega0)

    def _injections(self):
        return retained_injections(self.model, self.net, self._dsms_power, self._dsms_power.shape)

    def _apply_pending(self, t_now):
        if not self.events:
            self._t_prev = t_now
            return
        before = self.model
        model, rebuild = apply_events(self.model, self.events, self._t_prev, t_now)
        if model is not before:
            for ev in self.events:
                if self._t_prev + 1e-9 < ev.time <= t_now + 1e-9:
                    self.applied_events.append(ev.describe())
            self.model = model
            if rebuild:
                self.net = build_reduced_network(model)
                self.rebuilds += 1
        self._t_prev = t_now

    def frequency(self):
        """Measured frequency deviation (pu) at the DSMS bus."""
        if self.freq_mode == "machine":
            return self.state.domega[..., self._nearest_machine()]
        return self.meter.value

    def bus_voltage(self):
        return self.state.v_retained[..., self._bus_index()]

    def advance(self, dsms_power=None):
        """Integrate one step with the given DSMS injection (complex, system base)."""
        if dsms_power is not None:
            self._dsms_power = np.broadcast_to(np.asarray(dsms_power, dtype=complex), self.diverged.shape).copy()
        self._apply_pending(self.state.t)
        s = self._injections()
        st = self.state
        if self.on_divergence == "flag":
            with np.errstate(invalid="ignore", divide="ignore"):
                delta, domega, v = rk4_arrays(self.model, self.net, st.delta, st.domega, s, self.dt, "nan")
        else:
            delta, domega, v = rk4_arrays(self.model, self.net, st.delta, st.domega, s, self.dt)
        self._step += 1
        t = self._step * self.dt + self._t0
        bad = ~np.all(np.isfinite(domega) & (np.abs(domega) < GUARD_BAND), axis=-1)
        if np.any(bad & ~self.diverged):
            if self.on_divergence == "raise":
                self.state = GridState(delta, domega, t, v)
                raise DivergenceError(f"speed deviation left the guard band at t={t:.4f} s", t)
            newly = bad & ~self.diverged
            self.diverged_at = np.where(newly, t, self.diverged_at)
            self.diverged |= bad
        if np.any(self.diverged):
            keep = self.diverged[..., None]
            delta = np.where(keep, st.delta, delta)
            domega = np.where(keep, st.domega, domega)
            v = np.where(keep, st.v_retained, v)
        self.state = GridState(delta, domega, t, v)
        self.meter.update(self._bus_angle(v))
        return self.state

    def run(self, t_end, dsms_power=None):
        n = int(round((t_end - self.state.t) / self.dt))
        for _ in range(n):
            self.advance(dsms_power)
        return self.state
