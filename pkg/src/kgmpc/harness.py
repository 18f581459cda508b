"""System variants, closed-loop scenarios, metrics and variant comparisons.

Variants of the benchmark:

* ``A`` the four-machine system;
* ``B`` machine 3 replaced by a negative constant-impedance load that draws
  minus its pre-disturbance output (same steady state, less inertia);
* ``C`` variant B plus the storage unit at the machine-3 bus, idle in steady
  state and driven by the predictive controller during the disturbance.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import grid_model, load_config, section
from .dsms import Actuator, DsmsParams, actuator_step
from .errors import ConfigError, DivergenceError
from .grid import Event, GridSimulator, fault_script, solve_equilibrium
from .grid.model import GridModel, GridState, Load
from .grid.network import build_reduced_network
from .koopman import LinearPredictor, load_predictor
from .mpc import ControllerState, MpcConfig, control_step

VARIANTS = ("A", "B", "C")
FAULTS = ("fault1", "fault2", "none", "custom")


@dataclass(frozen=True)
class Variant:
    tag: str
    model: GridModel
    state: GridState
    dsms: DsmsParams | None = None
    negative_load: complex = 0j


def _slot_index(model: GridModel, slot: str) -> int:
    names = [m.name for m in model.machines]
    if slot not in names:
        raise ConfigError(f"machine slot {slot!r} not in model")
    return names.index(slot)


def build_variant(base: GridModel, tag: str, dsms: DsmsParams | None = None, *, slot: str = "G3") -> Variant:
    """Variant ``tag`` of ``base`` at its own equilibrium.

    The negative load is sized from the slot machine's solved injection at the
    actual pre-disturbance bus voltage, so B and C reproduce A's steady state.
    """
    if tag not in VARIANTS:
        raise ConfigError(f"unknown system variant {tag!r}")
    model_a, state_a = solve_equilibrium(base)
    model_a = replace(model_a, name="A")
    if tag == "A":
        return Variant("A", model_a, state_a)
    k = _slot_index(model_a, slot)
    machine = model_a.machines[k]
    if model_a.dsms_bus != machine.bus:
        raise ConfigError("the storage bus must be the replaced machine's bus")
    net = build_reduced_network(model_a)
    v_bus = state_a.v_retained[..., net.retained_index(machine.bus)]
    e_k = machine.e * np.exp(1j * state_a.delta[k])
    s_inj = complex(v_bus * np.conj((e_k - v_bus) / model_a.machine_impedance(machine)))
    load = Load(machine.bus, -s_inj / abs(v_bus) ** 2)
    rest = model_a.machines[:k] + model_a.machines[k + 1:]
    angles = np.delete(state_a.delta, k)
    rest = tuple(replace(m, angle_guess=float(a)) for m, a in zip(rest, angles))
    slack = model_a.slack - (1 if model_a.slack > k else 0)
    if model_a.slack == k:
        raise ConfigError("the replaced machine cannot be the angle reference")
    model_b = replace(model_a, machines=rest, loads=model_a.loads + (load,), slack=slack, name=tag)
    model_b, state_b = solve_equilibrium(model_b)
    params = None
    if tag == "C":
        params = dsms or DsmsParams()
    return Variant(tag, model_b, state_b, params, -s_inj)


@dataclass(frozen=True)
class ScenarioConfig:
    variant: str = "C"
    fault: str = "fault1"
    t_end: float = 15.0
    dt: float = 1e-3
    record_ts: float = 0.01
    rms_window: tuple = (5.0, 15.0)
    settle_threshold: float = 5e-4
    t_f: float = 0.05
    freq_mode: str = "machine"
    predictor: str | None = None
    events: tuple = ()

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown system variant {self.variant!r}")
        if self.fault not in FAULTS:
            raise ConfigError(f"unknown fault script {self.fault!r}")
        if self.t_end <= 0 or self.dt <= 0 or self.record_ts <= 0:
            raise ConfigError("t_end, dt and record_ts must be positive")
        if self.fault == "custom" and not self.events:
            raise ConfigError("custom fault script needs an events list")

    @classmethod
    def from_config(cls, sec: dict, measurement: dict | None = None) -> ScenarioConfig:
        sec = dict(sec)
        keys = set(cls.__dataclass_fields__)
        unknown = set(sec) - keys
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        if "rms_window" in sec:
            sec["rms_window"] = tuple(float(x) for x in sec["rms_window"])
        if "events" in sec:
            sec["events"] = tuple(
                Event(float(e["time"]), str(e["kind"]), e.get("bus"), e.get("branch"),
                      complex(*e["value"]) if "value" in e else None)
                for e in sec["events"]
            )
        for key in ("t_f", "mode"):
            if measurement and key in measurement:
                sec.setdefault("freq_mode" if key == "mode" else key, measurement[key])
        return cls(**sec)

    def event_list(self):
        return list(self.events) if self.fault == "custom" else fault_script(self.fault)


@dataclass
class SeriesBundle:
    variant: str
    t: np.ndarray
    delta: np.ndarray
    domega: np.ndarray
    f: np.ndarray
    pe_dsms: np.ndarray
    u: np.ndarray
    omega_r: np.ndarray
    applied_events: list = field(default_factory=list)
    diverged: bool = False
    diverged_at: float | None = None
    controller: ControllerState | None = None

    def events_hash(self) -> str:
        return hashlib.sha256("\n".join(self.applied_events).encode()).hexdigest()


def run_scenario(sc: ScenarioConfig, variant: Variant, *, predictor: LinearPredictor | None = None,
                 mpc: MpcConfig | None = None) -> SeriesBundle:
    """Simulate one variant under the scenario's event script.

    For variant C the controller samples the storage-bus frequency every
    ``mpc.ts`` and the first-order actuator integrates at ``dt``. Divergence
    ends the run early and is flagged in the bundle.
    """
    if variant.tag != sc.variant:
        raise ConfigError(f"scenario expects variant {sc.variant}, got {variant.tag}")
    ctrl = None
    if variant.tag == "C":
        if predictor is None:
            if sc.predictor is None:
                raise ConfigError("variant C needs a predictor")
            predictor = load_predictor(sc.predictor)
        mpc = mpc or MpcConfig(ts=predictor.spec.ts)
        ctrl = ControllerState(predictor, mpc)
    model = variant.model
    sim = GridSimulator(model, variant.state, dt=sc.dt, events=sc.event_list(), t_f=sc.t_f, freq_mode=sc.freq_mode)
    steps = int(round(sc.t_end / sc.dt))
    rec_every = max(1, int(round(sc.record_ts / sc.dt)))
    ctrl_every = int(round(mpc.ts / sc.dt)) if ctrl else 0
    act = Actuator.create(variant.dsms, v_gq=float(abs(sim.bus_voltage()))) if variant.dsms else None
    scale = variant.dsms.mva / model.base_mva if variant.dsms else 0.0
    rows = []
    p_inj, u_cmd = 0.0, 0.0

    def record():
        omega_r = act.omega_r if act else math.nan
        rows.append((sim.t, sim.state.delta.copy(), sim.state.domega.copy(), float(sim.frequency()),
                     float(p_inj), u_cmd, float(omega_r)))

    diverged, t_div = False, None
    try:
        for step in range(steps + 1):
            if ctrl is not None and step % ctrl_every == 0:
                u_cmd = control_step(ctrl, float(sim.frequency()), round(sim.t, 9)).u
            if step % rec_every == 0:
                record()
            if step == steps:
                break
            if act is not None:
                v = sim.bus_voltage()
                omega_s = model.omega0 * (1.0 + float(sim.frequency()))
                p_inj, act = actuator_step(act, u_cmd, sc.dt, v_gq=float(abs(v)), omega_s=omega_s)
                sim.advance(complex(p_inj * scale))
            else:
                sim.advance()
    except DivergenceError as exc:
        diverged, t_div = True, exc.time
    cols = list(zip(*rows))
    return SeriesBundle(
        variant.tag, np.array(cols[0]), np.array(cols[1]), np.array(cols[2]), np.array(cols[3]),
        np.array(cols[4]), np.array(cols[5]), np.array(cols[6]), list(sim.applied_events), diverged, t_div, ctrl,
    )


TS_HEADER_FIXED = ("f_dsms_bus", "pe_dsms")


def series_csv(b: SeriesBundle) -> str:
    """``t,delta_1..delta_n,domega_1..domega_n,f_dsms_bus,pe_dsms`` with repr floats."""
    n = b.delta.shape[1]
    header = ["t"] + [f"delta_{i + 1}" for i in range(n)] + [f"domega_{i + 1}" for i in range(n)] + list(TS_HEADER_FIXED)
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for k in range(len(b.t)):
        vals = [b.t[k], *b.delta[k], *b.domega[k], b.f[k], b.pe_dsms[k]]
        buf.write(",".join(repr(float(v)) for v in vals) + "\n")
    return buf.getvalue()


def plot_data_csv(b: SeriesBundle, every: float = 0.05) -> str:
    step = max(1, int(round(every / (b.t[1] - b.t[0])))) if len(b.t) > 1 else 1
    buf = io.StringIO()
    buf.write("t,f_dsms_bus,u,omega_r\n")
    for k in range(0, len(b.t), step):
        buf.write(f"{float(b.t[k])!r},{float(b.f[k])!r},{float(b.u[k])!r},{float(b.omega_r[k])!r}\n")
    return buf.getvalue()


@dataclass(frozen=True)
class Metrics:
    peak: float
    rms: float
    settling_time: float
    settled: bool
    effort: float
    window_clipped: bool = False
    diverged: bool = False


def compute_metrics(t, f, u=None, *, window=(5.0, 15.0), threshold=5e-4, diverged=False) -> Metrics:
    """Peak |f|, RMS over ``window``, settling time and control effort.

    Settling time is the first sample after the last one with
    ``|f| >= threshold``; a series that ends outside the band is not settled
    (settling time ``inf``). Control effort integrates ``u^2`` with
    zero-order hold between samples.
    """
    t = np.asarray(t, dtype=float)
    f = np.asarray(f, dtype=float)
    if t.size == 0 or t.shape != f.shape:
        raise ValueError("series must be non-empty and aligned")
    a = np.abs(f)
    peak = float(a.max())
    lo, hi = window
    clipped = lo < t[0] - 1e-9 or hi > t[-1] + 1e-9
    mask = (t >= lo - 1e-9) & (t <= hi + 1e-9)
    rms = float(np.sqrt(np.mean(f[mask] ** 2))) if mask.any() else math.nan
    bad = np.flatnonzero(a >= threshold)
    if bad.size == 0:
        settle, settled = 0.0, True
    elif bad[-1] == len(t) - 1:
        settle, settled = math.inf, False
    else:
        settle, settled = float(t[bad[-1] + 1]), True
    effort = 0.0
    if u is not None and len(t) > 1:
        u = np.asarray(u, dtype=float)
        effort = float(np.sum(u[:-1] ** 2 * np.diff(t)))
    return Metrics(peak, rms, settle, settled, effort, clipped, diverged)


# -- comparisons -----------------------------------------------------------------

@dataclass
class Comparison:
    fault: str
    bundles: dict
    metrics: dict
    errors: dict
    ordering: dict

    @property
    def ordering_ok(self) -> bool:
        return all(self.ordering.values())

    @property
    def diverged(self) -> bool:
        return bool(self.errors) or any(m.diverged for m in self.metrics.values())

    def exit_code(self) -> int:
        if self.diverged:
            return 3
        return 0 if self.ordering_ok else 2


def qualitative_ordering(metrics: dict) -> dict:
    """Checks of the expected ranking among whichever variants are present."""
    out = {}
    if "A" in metrics and "B" in metrics:
        out["peak_B_gt_A"] = metrics["B"].peak > metrics["A"].peak
    if "B" in metrics and "C" in metrics:
        out["peak_C_lt_B"] = metrics["C"].peak < metrics["B"].peak
        out["rms_C_lt_B"] = metrics["C"].rms < metrics["B"].rms
    if "A" in metrics and "C" in metrics:
        out["rms_C_lt_A"] = metrics["C"].rms < metrics["A"].rms
    return out


def _run_one(args):
    sc, variant, predictor, mpc = args
    try:
        return run_scenario(sc, variant, predictor=predictor, mpc=mpc), None
    except Exception as exc:  # reported per variant, others continue
        return None, f"{type(exc).__name__}: {exc}"


def compare(fault: str, variants, base: GridModel, *, dsms: DsmsParams | None = None,
            predictor: LinearPredictor | None = None, mpc: MpcConfig | None = None,
            scenario: ScenarioConfig | None = None, jobs: int = 1, slot: str = "G3") -> Comparison:
    """Run every requested variant under the same event script."""
    scenario = scenario or ScenarioConfig()
    tags = list(variants)
    work = []
    for tag in tags:
        sc = replace(scenario, variant=tag, fault=fault)
        work.append((sc, build_variant(base, tag, dsms, slot=slot), predictor, mpc))
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(work))) as pool:
            results = list(pool.map(_run_one, work))
    else:
        results = [_run_one(w) for w in work]
    bundles, metrics, errors = {}, {}, {}
    for tag, (bundle, err) in zip(tags, results):
        if err is not None:
            errors[tag] = err
            continue
        bundles[tag] = bundle
        metrics[tag] = compute_metrics(bundle.t, bundle.f, bundle.u, window=scenario.rms_window,
                                       threshold=scenario.settle_threshold, diverged=bundle.diverged)
    hashes = {b.events_hash() for b in bundles.values()}
    if len(hashes) > 1:
        raise RuntimeError("variants received different event sequences")
    return Comparison(fault, bundles, metrics, errors, qualitative_ordering(metrics))


SUMMARY_HEADER = ("variant", "peak", "rms", "settling_time", "settled", "effort", "window_clipped", "diverged",
                  "events_hash")


def summary_csv(cmp: Comparison) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for tag, m in cmp.metrics.items():
        w.writerow([tag, repr(m.peak), repr(m.rms), repr(m.settling_time), int(m.settled), repr(m.effort),
                    int(m.window_clipped), int(m.diverged), cmp.bundles[tag].events_hash()])
    for tag, err in cmp.errors.items():
        w.writerow([tag, "", "", "", "", "", "", 1, err])
    for name, ok in cmp.ordering.items():
        w.writerow([f"check:{name}", int(ok), "", "", "", "", "", "", ""])
    return buf.getvalue()


def write_report(cmp: Comparison, out, *, plot_data=False) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for tag, b in cmp.bundles.items():
        (out / f"{cmp.fault}_{tag}.csv").write_text(series_csv(b))
        if plot_data:
            (out / f"{cmp.fault}_{tag}_plot.csv").write_text(plot_data_csv(b))
    (out / "summary.csv").write_text(summary_csv(cmp))


# -- config helpers ----------------------------------------------------------------

def setup_from_config(cfg: dict | None = None):
    """``(base model, dsms params, mpc config, scenario config)`` from a config dict."""
    cfg = cfg if cfg is not None else load_config()
    base = grid_model(cfg)
    dsms_sec = section(cfg, "dsms")
    slot = dsms_sec.pop("slot", "G3")
    dsms = DsmsParams.from_config(dsms_sec, base.omega0)
    mpc = MpcConfig.from_config(section(cfg, "mpc"))
    sc = ScenarioConfig.from_config(section(cfg, "scenario"), section(cfg, "measurement"))
    return base, dsms, mpc, sc, slot
