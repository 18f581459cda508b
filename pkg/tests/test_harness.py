import math
from dataclasses import replace

import numpy as np
import pytest

from kgmpc.errors import ConfigError
from kgmpc.grid import GridSimulator
from kgmpc.grid.network import build_reduced_network
from kgmpc.harness import (Comparison, Metrics, ScenarioConfig, build_variant, compute_metrics, qualitative_ordering,
                           run_scenario, series_csv, summary_csv)
from kgmpc.koopman import DelaySpec, LinearPredictor


@pytest.fixture(scope="module")
def variants(benchmark):
    base, dsms, _, _, slot = benchmark
    return {tag: build_variant(base, tag, dsms, slot=slot) for tag in "ABC"}


def test_variant_shapes(variants):
    assert len(variants["A"].model.machines) == 4
    assert len(variants["B"].model.machines) == 3
    assert variants["A"].dsms is None and variants["B"].dsms is None
    assert variants["C"].dsms is not None
    assert variants["B"].negative_load == variants["C"].negative_load != 0


def test_inertia_loss(variants, benchmark):
    base = benchmark[0]
    g3 = [m for m in base.machines if m.name == "G3"][0]
    lost = g3.h * g3.mva / base.base_mva
    assert lost == pytest.approx(6.175 * 9.0)
    assert variants["B"].model.inertia_sum == pytest.approx(variants["A"].model.inertia_sum - lost, rel=1e-12)


def test_replacement_keeps_steady_state(variants):
    a, b = variants["A"], variants["B"]
    keep = [0, 1, 3]
    assert np.allclose(b.state.delta, a.state.delta[keep], atol=1e-8)
    assert np.allclose(b.model.pm, a.model.pm[keep], atol=1e-8)
    va = a.state.v_retained[0]
    vb = b.state.v_retained[0]
    assert abs(va - vb) <= 1e-8


@pytest.mark.parametrize("tag", "AB")
def test_undisturbed_variants_stay_put(variants, tag):
    sc = ScenarioConfig(variant=tag, fault="none", t_end=1.0)
    bundle = run_scenario(sc, variants[tag])
    assert np.max(np.abs(bundle.f)) <= 1e-9
    assert not bundle.diverged


def _idle_predictor(nd=2):
    spec = DelaySpec(nd=nd)
    n = spec.lifted_size
    a = np.zeros((n, n))
    a[-1, -1] = 1.0
    b = np.zeros((n, 1))
    return LinearPredictor(a, b, spec, spec.output_matrix())


def test_storage_variant_idles_at_equilibrium(variants):
    sc = ScenarioConfig(variant="C", fault="none", t_end=1.0)
    bundle = run_scenario(sc, variants["C"], predictor=_idle_predictor())
    assert np.max(np.abs(bundle.u)) == 0.0
    assert np.max(np.abs(bundle.f)) <= 1e-9
    assert bundle.omega_r[-1] == pytest.approx(bundle.omega_r[0])


def test_scenario_requires_matching_variant(variants):
    with pytest.raises(ConfigError):
        run_scenario(ScenarioConfig(variant="A"), variants["B"])
    with pytest.raises(ConfigError):
        run_scenario(ScenarioConfig(variant="C", predictor=None), variants["C"])


def test_scenario_config_validation():
    with pytest.raises(ConfigError):
        ScenarioConfig(fault="fault3")
    with pytest.raises(ConfigError):
        ScenarioConfig(fault="custom")
    with pytest.raises(ConfigError):
        ScenarioConfig.from_config({"speed": 1})
    sc = ScenarioConfig.from_config(
        {"fault": "custom", "events": [{"time": 1.0, "kind": "trip_branch", "branch": "7-8"}]},
        {"mode": "bus", "t_f": 0.02})
    assert sc.freq_mode == "bus" and sc.t_f == 0.02
    assert sc.event_list()[0].branch == "7-8"


def test_series_csv_layout(variants):
    bundle = run_scenario(ScenarioConfig(variant="A", fault="fault1", t_end=0.05), variants["A"])
    lines = series_csv(bundle).splitlines()
    assert lines[0] == ("t,delta_1,delta_2,delta_3,delta_4,domega_1,domega_2,domega_3,domega_4,"
                        "f_dsms_bus,pe_dsms")
    assert len(lines) == 1 + len(bundle.t)


# -- metrics --------------------------------------------------------------------------

def test_metrics_example():
    t = np.array([0.0, 1.0, 2.0, 3.0, 4.0])
    f = np.array([0.0, 0.001, -0.002, 0.0001, 0.0])
    m = compute_metrics(t, f, np.array([0.1, 0.2, 0.0, 0.0, 0.0]), window=(1.0, 3.0), threshold=5e-4)
    assert m.peak == 0.002
    assert m.rms == pytest.approx(math.sqrt((0.001 ** 2 + 0.002 ** 2 + 0.0001 ** 2) / 3))
    assert m.settling_time == 3.0 and m.settled
    assert m.effort == pytest.approx(0.1 ** 2 + 0.2 ** 2)
    assert not m.window_clipped


def test_unsettled_series():
    m = compute_metrics([0.0, 1.0, 2.0], [0.0, 0.0, 0.01], window=(0.0, 5.0), threshold=5e-4)
    assert m.settling_time == math.inf and not m.settled
    assert m.window_clipped
    quiet = compute_metrics([0.0, 1.0], [0.0, 1e-5], window=(0.0, 1.0), threshold=5e-4)
    assert quiet.settling_time == 0.0 and quiet.settled


def test_metrics_reject_empty():
    with pytest.raises(ValueError):
        compute_metrics([], [])


def _m(peak, rms):
    return Metrics(peak, rms, 0.0, True, 0.0)


def test_ordering_and_exit_codes():
    good = {"A": _m(1.0, 1.0), "B": _m(2.0, 1.5), "C": _m(1.5, 0.5)}
    checks = qualitative_ordering(good)
    assert checks == {"peak_B_gt_A": True, "peak_C_lt_B": True, "rms_C_lt_B": True, "rms_C_lt_A": True}
    assert Comparison("fault1", {}, good, {}, checks).exit_code() == 0
    bad = dict(good, C=_m(2.5, 0.5))
    assert Comparison("fault1", {}, bad, {}, qualitative_ordering(bad)).exit_code() == 2
    assert Comparison("fault1", {}, good, {"C": "boom"}, checks).exit_code() == 3
    assert qualitative_ordering({"A": _m(1, 1)}) == {}
