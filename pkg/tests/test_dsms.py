import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from kgmpc.dsms import (Actuator, DsmsParams, actuator_step, admissible, dsms_derivatives, power_balance_residual,
                        steady_state, stored_energy)
from kgmpc.errors import ConfigError

LOSSLESS = DsmsParams(r_s=0.0, r_g=0.0, mode="full_ode")


def test_zero_power_operating_point_is_stationary():
    p = DsmsParams()
    state, cmd = steady_state(p, 0.0)
    assert state.i_sq == 0.0 and state.i_gq == 0.0
    assert np.max(np.abs(dsms_derivatives(state, cmd, 1.0, p))) <= 1e-12


@pytest.mark.parametrize("p_out", [-0.3, 0.1, 0.3])
def test_loaded_operating_point_only_moves_the_rotor(p_out):
    p = DsmsParams()
    state, cmd = steady_state(p, p_out, v_gq=0.98)
    d = dsms_derivatives(state, cmd, 0.98, p)
    electrical = np.delete(d, [2, 3])
    assert np.max(np.abs(electrical)) <= 1e-9
    # delivering power slows the flywheel, absorbing speeds it up
    assert np.sign(d[3]) == -np.sign(p_out)
    assert d[3] == pytest.approx(-p.e_q * state.i_sq * p.omega0 / (2 * p.h))


def test_lossless_power_chain_balances():
    for p_out in (0.0, 0.2, -0.25):
        state, cmd = steady_state(LOSSLESS, p_out)
        assert np.max(np.abs(power_balance_residual(state, cmd, 1.0, LOSSLESS))) <= 1e-9


def test_full_ode_idle_stays_balanced():
    act = Actuator.create(LOSSLESS)
    for _ in range(50):
        _, act = actuator_step(act, 0.0, 1e-3)
    res = power_balance_residual(act.ode, act._cmd, 1.0, LOSSLESS)
    assert np.max(np.abs(res)) <= 1e-9
    assert act.ode.omega_r == pytest.approx(LOSSLESS.omega0, abs=1e-12)


@given(st.floats(-1.0, 1.0), st.floats(0.9, 1.1))
def test_admissible_clamps_and_respects_band(cmd, speed):
    p = DsmsParams()
    out = admissible(p, speed * p.omega0, cmd)
    assert -p.b <= out <= p.b
    if speed <= p.omega_min:
        assert out <= 0.0
    if speed >= p.omega_max:
        assert out >= 0.0
    if p.omega_min < speed < p.omega_max:
        assert out == float(np.clip(cmd, -p.b, p.b))


def test_first_order_step_response():
    p = DsmsParams(tau_c=0.02)
    act = Actuator.create(p)
    out = []
    for _ in range(20):
        y, act = actuator_step(act, 0.2, 1e-3)
        out.append(y)
    assert out[-1] == pytest.approx(0.2 * (1 - math.exp(-1)), rel=1e-12)
    assert np.all(np.diff(out) > 0)


@pytest.mark.parametrize("mode", ["ideal", "first_order", "full_ode"])
def test_energy_audit(mode):
    p = DsmsParams(mode=mode)
    act = Actuator.create(p)
    e0 = stored_energy(act)
    for k in range(300):
        _, act = actuator_step(act, 0.25 if k < 150 else -0.1, 1e-3)
    assert e0 - stored_energy(act) == pytest.approx(act.energy_out, rel=1e-6, abs=1e-9)


def test_modes_agree_after_transients():
    finals = {}
    for mode in ("ideal", "first_order", "full_ode"):
        act = Actuator.create(DsmsParams(mode=mode))
        for _ in range(300):
            y, act = actuator_step(act, 0.15, 1e-3)
        finals[mode] = y
    assert finals["first_order"] == pytest.approx(finals["ideal"], abs=1e-6)
    assert finals["full_ode"] == pytest.approx(finals["ideal"], abs=5e-3)


def test_band_stops_charging():
    p = DsmsParams(mode="ideal", omega_max=1.001)
    act = Actuator.create(p)
    for _ in range(2000):
        y, act = actuator_step(act, -0.3, 1e-3)
    assert y == 0.0
    assert act.omega_r <= p.omega_max * p.omega0 + 0.3 * 1e-3 * p.omega0 / (2 * p.h)


def test_batch_actuator_matches_scalar():
    p = DsmsParams()
    batch = Actuator.create(p, shape=(3,))
    single = [Actuator.create(p) for _ in range(3)]
    cmds = np.array([-0.3, 0.05, 0.2])
    for _ in range(40):
        yb, batch = actuator_step(batch, cmds, 1e-3)
        ys = []
        for i in range(3):
            y, single[i] = actuator_step(single[i], cmds[i], 1e-3)
            ys.append(y)
    assert np.allclose(yb, ys, rtol=0, atol=1e-15)


def test_parameter_validation():
    with pytest.raises(ConfigError):
        DsmsParams(mode="magic")
    with pytest.raises(ConfigError):
        DsmsParams(omega_min=1.01)
    with pytest.raises(ConfigError):
        DsmsParams(h=0.0)
    p = DsmsParams.from_config({"b": 0.2, "mode": "ideal"})
    assert p.b == 0.2 and p.mode == "ideal"
