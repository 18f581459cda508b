"""Decoupled synchronous machine behind a back-to-back converter.

Quantities are per unit on the unit rating (``DsmsParams.mva``); ``omega_r``
is the absolute electrical rotor speed in rad/s.

Current directions: machine-side currents flow from the machine into the
converter, grid-side currents flow from the converter into the grid. With
that convention the grid-side voltage terms read ``+v_gc - V_gq`` and the
output power is ``V_gq * i_gq``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError

OMEGA0 = 2.0 * math.pi * 60.0
MODES = ("ideal", "first_order", "full_ode")


@dataclass(frozen=True)
class DsmsParams:
    e_q: float = 1.0
    r_s: float = 0.0025
    x_s: float = 0.25
    r_g: float = 0.001
    x_g: float = 0.1656
    h: float = 6.175
    c_dc: float = 0.004
    v_dc: float = 1.0
    mva: float = 900.0
    b: float = 0.3
    omega_min: float = 0.95
    omega_max: float = 1.05
    mode: str = "first_order"
    tau_c: float = 0.02
    omega0: float = OMEGA0
    current_bandwidth: float = 200.0
    dc_bandwidth: float = 20.0
    modulation_limit: float = 1.2

    def __post_init__(self):
        if min(self.x_s, self.x_g, self.h, self.c_dc, self.v_dc, self.b) <= 0:
            raise ConfigError("DSMS reactances, H, C_dc, v_dc and b must be positive")
        if min(self.r_s, self.r_g) < 0:
            raise ConfigError("DSMS resistances must be non-negative")
        if not 0 < self.omega_min < 1 < self.omega_max:
            raise ConfigError("speed band must satisfy 0 < omega_min < 1 < omega_max")
        if self.mode not in MODES:
            raise ConfigError(f"unknown actuator mode {self.mode!r}")
        if self.mode == "first_order" and self.tau_c <= 0:
            raise ConfigError("tau_c must be positive")

    @classmethod
    def from_config(cls, section: dict, omega0: float = OMEGA0) -> DsmsParams:
        keys = {f.name for f in cls.__dataclass_fields__.values()} - {"omega0"}
        kwargs = {k: section[k] for k in keys if k in section}
        return cls(omega0=omega0, **kwargs)


@dataclass(frozen=True)
class InnerGains:
    """PI gains of the machine-side/grid-side current loops and the DC loop."""

    kp_s: float
    ki_s: float
    kp_g: float
    ki_g: float
    kp_dc: float
    ki_dc: float
    limit: float = 1.2

    @classmethod
    def from_params(cls, p: DsmsParams) -> InnerGains:
        # internal-model tuning: each current loop becomes a first-order lag at
        # current_bandwidth; the DC loop gets a double pole at dc_bandwidth / 2
        a = p.current_bandwidth
        kp_dc = p.dc_bandwidth * p.c_dc
        return cls(
            kp_s=a * p.x_s / p.omega0, ki_s=a * p.r_s,
            kp_g=a * p.x_g / p.omega0, ki_g=a * p.r_g,
            kp_dc=kp_dc, ki_dc=kp_dc * p.dc_bandwidth / 4.0,
            limit=p.modulation_limit,
        )


@dataclass(frozen=True)
class ConverterCommand:
    v_sd: float
    v_sq: float
    v_gd: float
    v_gq: float


@dataclass(frozen=True)
class DsmsState:
    i_sd: float = 0.0
    i_sq: float = 0.0
    delta_r: float = 0.0
    omega_r: float = OMEGA0
    i_gd: float = 0.0
    i_gq: float = 0.0
    v_dc: float = 1.0
    xi_sd: float = 0.0
    xi_sq: float = 0.0
    xi_gd: float = 0.0
    xi_gq: float = 0.0
    xi_dc: float = 0.0

    def vector(self) -> np.ndarray:
        return np.array([self.i_sd, self.i_sq, self.delta_r, self.omega_r, self.i_gd, self.i_gq, self.v_dc])

    def with_vector(self, x) -> DsmsState:
        return replace(self, i_sd=float(x[0]), i_sq=float(x[1]), delta_r=float(x[2]), omega_r=float(x[3]),
                       i_gd=float(x[4]), i_gq=float(x[5]), v_dc=float(x[6]))


def steady_state(params: DsmsParams, p_out: float = 0.0, v_gq: float = 1.0, omega_s: float | None = None):
    """Electrical steady state delivering ``p_out`` with zero reactive current.

    Returns ``(state, command)``. Rotor speed is nominal; for ``p_out != 0`` the
    rotor keeps decelerating, all other derivatives vanish.
    """
    p = params
    i_gq = p_out / v_gq
    v_gc_q = v_gq + p.r_g * i_gq
    v_gc_d = -p.x_g * i_gq
    # DC balance: e_q i_sq = v_gc . i_g
    i_sq = (v_gc_q * i_gq) / p.e_q
    cmd = ConverterCommand(v_sd=p.x_s * i_sq, v_sq=p.e_q - p.r_s * i_sq, v_gd=v_gc_d, v_gq=v_gc_q)
    state = DsmsState(i_sq=i_sq, i_gq=i_gq, v_dc=p.v_dc, omega_r=p.omega0,
                      xi_sq=p.r_s * i_sq, xi_gq=p.r_g * i_gq, xi_dc=i_gq - p.e_q * i_sq / v_gq)
    return state, cmd


def dsms_derivatives(state: DsmsState, cmd: ConverterCommand, v_gq: float, params: DsmsParams,
                     omega_s: float | None = None) -> np.ndarray:
    """Time derivative of ``[i_sd, i_sq, delta_r, omega_r, i_gd, i_gq, v_dc]``."""
    p = params
    w_r = state.omega_r
    w_s = p.omega0 if omega_s is None else omega_s
    if w_r <= 0:
        raise ValueError("rotor speed must be positive")
    if state.v_dc <= 0:
        raise ValueError("DC-link voltage must be positive")
    di_sd = (p.x_s * state.i_sq - p.r_s * state.i_sd - cmd.v_sd) * w_r / p.x_s
    di_sq = (-p.x_s * state.i_sd - p.r_s * state.i_sq - cmd.v_sq + p.e_q) * w_r / p.x_s
    ddelta = w_r - p.omega0
    p_e = p.e_q * state.i_sq
    domega = -p_e * p.omega0 / (2.0 * p.h)
    di_gd = (p.x_g * state.i_gq - p.r_g * state.i_gd + cmd.v_gd) * w_s / p.x_g
    di_gq = (-p.x_g * state.i_gd - p.r_g * state.i_gq + cmd.v_gq - v_gq) * w_s / p.x_g
    i_dc = p_e / state.v_dc
    i_load = (cmd.v_gd * state.i_gd + cmd.v_gq * state.i_gq) / state.v_dc
    dv_dc = (i_dc - i_load) / p.c_dc
    return np.array([di_sd, di_sq, ddelta, domega, di_gd, di_gq, dv_dc])


def power_balance_residual(state: DsmsState, cmd: ConverterCommand, v_gq: float, params: DsmsParams) -> np.ndarray:
    """Audit of the AC/DC power chain (4 entries, pu).

    ``[e_q i_sq - v_dc i_dc, v_dc i_dc - v_sc.i_s, v_gc.i_g - V_gq i_gq,
    machine-side AC power - grid-side AC power]``.
    """
    p = params
    p_machine = p.e_q * state.i_sq
    i_dc = p_machine / state.v_dc if state.v_dc else 0.0
    p_sc = cmd.v_sq * state.i_sq + cmd.v_sd * state.i_sd
    p_gc = cmd.v_gq * state.i_gq + cmd.v_gd * state.i_gd
    p_grid = v_gq * state.i_gq
    return np.array([p_machine - state.v_dc * i_dc, state.v_dc * i_dc - p_sc, p_gc - p_grid, p_machine - p_grid])


def _saturate(vd, vq, limit):
    mag = math.hypot(vd, vq)
    if mag > limit:
        return vd * limit / mag, vq * limit / mag, True
    return vd, vq, False


def inner_control_step(state: DsmsState, p_ref: float, v_gq: float, gains: InnerGains, dt: float,
                       params: DsmsParams) -> tuple[ConverterCommand, DsmsState]:
    """Converter voltages for one control period and the advanced PI integrators.

    Machine side tracks ``i_sq = p_ref / e_q``, ``i_sd = 0``; grid side holds
    ``v_dc`` at nominal through ``i_gq`` and keeps ``i_gd = 0``. Integrators
    are frozen while their converter is saturated.
    """
    p = params
    g = gains
    e_sd = -state.i_sd
    e_sq = p_ref / p.e_q - state.i_sq
    u_sd = g.kp_s * e_sd + state.xi_sd
    u_sq = g.kp_s * e_sq + state.xi_sq
    v_sd, v_sq, sat_s = _saturate(p.x_s * state.i_sq - u_sd, p.e_q - p.x_s * state.i_sd - u_sq, g.limit)

    e_dc = state.v_dc - p.v_dc
    i_ff = p.e_q * state.i_sq / v_gq if v_gq > 0 else 0.0
    i_gq_ref = i_ff + g.kp_dc * e_dc + state.xi_dc
    e_gd = -state.i_gd
    e_gq = i_gq_ref - state.i_gq
    u_gd = g.kp_g * e_gd + state.xi_gd
    u_gq = g.kp_g * e_gq + state.xi_gq
    v_gd, v_gq_cmd, sat_g = _saturate(-p.x_g * state.i_gq + u_gd, v_gq + p.x_g * state.i_gd + u_gq, g.limit)

    updates = {}
    if not sat_s:
        updates.update(xi_sd=state.xi_sd + g.ki_s * e_sd * dt, xi_sq=state.xi_sq + g.ki_s * e_sq * dt)
    if not sat_g:
        updates.update(xi_gd=state.xi_gd + g.ki_g * e_gd * dt, xi_gq=state.xi_gq + g.ki_g * e_gq * dt,
                       xi_dc=state.xi_dc + g.ki_dc * e_dc * dt)
    return ConverterCommand(v_sd, v_sq, v_gd, v_gq_cmd), replace(state, **updates)


@dataclass
class Actuator:
    """DSMS seen from the grid: commanded power in, injected power out.

    ``p`` is the injected power for the reduced modes; ``ode`` holds the full
    electrical state in ``full_ode`` mode. Arrays are accepted for the reduced
    modes so that a batch of units can be stepped at once.
    """

    params: DsmsParams
    omega_r: float | np.ndarray = OMEGA0
    p: float | np.ndarray = 0.0
    ode: DsmsState | None = None
    gains: InnerGains | None = None
    energy_out: float = 0.0
    substep: float = 1e-4
    _cmd: ConverterCommand | None = field(default=None, repr=False)

    @classmethod
    def create(cls, params: DsmsParams, shape=(), v_gq: float = 1.0) -> Actuator:
        if params.mode == "full_ode":
            state, cmd = steady_state(params, 0.0, v_gq)
            return cls(params, params.omega0, 0.0, state, InnerGains.from_params(params), _cmd=cmd)
        if shape:
            return cls(params, np.full(shape, params.omega0), np.zeros(shape))
        return cls(params)


def admissible(params: DsmsParams, omega_r, p_cmd):
    """Clamp to ``±b`` and drop the sign that would push speed further out of band."""
    p = np.clip(p_cmd, -params.b, params.b)
    low = omega_r <= params.omega_min * params.omega0
    high = omega_r >= params.omega_max * params.omega0
    p = np.where(low, np.minimum(p, 0.0), p)
    p = np.where(high, np.maximum(p, 0.0), p)
    return p if np.ndim(p) else float(p)


def _full_ode_advance(act: Actuator, p_cmd, dt, v_gq, omega_s):
    p = act.params
    state = act.ode
    n = max(1, int(round(dt / act.substep)))
    h = dt / n
    energy = act.energy_out
    cmd = act._cmd
    for _ in range(n):
        p_ref = admissible(p, state.omega_r, p_cmd)
        cmd, state = inner_control_step(state, p_ref, v_gq, act.gains, h, p)

        def rhs(x):
            s = state.with_vector(x)
            dx = dsms_derivatives(s, cmd, v_gq, p, omega_s)
            p_term = cmd.v_gd * s.i_gd + cmd.v_gq * s.i_gq
            return dx, p_term

        x0 = state.vector()
        k1, q1 = rhs(x0)
        k2, q2 = rhs(x0 + 0.5 * h * k1)
        k3, q3 = rhs(x0 + 0.5 * h * k2)
        k4, q4 = rhs(x0 + h * k3)
        state = state.with_vector(x0 + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
        energy += h / 6.0 * (q1 + 2 * q2 + 2 * q3 + q4)
    p_out = v_gq * state.i_gq
    return p_out, replace(act, ode=state, omega_r=state.omega_r, p=p_out, energy_out=energy, _cmd=cmd)


def actuator_step(act: Actuator, p_cmd, dt: float, v_gq: float = 1.0, omega_s: float | None = None):
    """Advance the unit by ``dt`` under command ``p_cmd``.

    Returns ``(p_injected, actuator)`` with ``p_injected`` the output at the end
    of the step. The flywheel obeys ``(2H/omega0) d omega_r/dt = -p``.
    """
    p = act.params
    if p.mode == "full_ode":
        return _full_ode_advance(act, p_cmd, dt, v_gq, omega_s)
    target = admissible(p, act.omega_r, p_cmd)
    if p.mode == "ideal":
        p_new = target
        energy = p_new * dt
    else:
        decay = math.exp(-dt / p.tau_c)
        p_new = target + (act.p - target) * decay
        # exact integral of the exponential approach over the step
        energy = target * dt + (act.p - target) * p.tau_c * (1.0 - decay)
    omega_r = act.omega_r - energy * p.omega0 / (2.0 * p.h)
    return p_new, replace(act, omega_r=omega_r, p=p_new, energy_out=act.energy_out + np.sum(energy))


def stored_energy(act: Actuator) -> float:
    """Flywheel term consistent with the swing relation plus DC-link energy (pu·s)."""
    p = act.params
    e = 2.0 * p.h * float(np.sum(act.omega_r)) / p.omega0
    if act.ode is not None:
        e += 0.5 * p.c_dc * act.ode.v_dc ** 2
    return e
