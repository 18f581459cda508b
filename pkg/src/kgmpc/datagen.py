"""Offline simulation campaigns for predictor identification.

Each trajectory starts from the grid equilibrium with random angle / speed
offsets on every machine and is driven by a random power command applied
through the storage unit. The measured frequency deviation (``y``)
and the commanded power (``u``) are recorded every ``ts``.

Randomness is counter based: trajectory ``i`` of seed ``s`` always draws the
same numbers, however the campaign is chunked or parallelised.
"""

from __future__ import annotations

import hashlib
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .dsms import Actuator, DsmsParams, actuator_step
from .errors import ConfigError, IntegrityError
from .grid import GridSimulator, GridState, post_fault_topology, solve_equilibrium
from .grid.model import GridModel
from .koopman import DelaySpec, LinearPredictor, SnapshotSet, lift, predict, relative_rmse, save_snapshots, windows

# trajectories per work unit; fixed so results do not depend on the job count
CHUNK = 200

_IC_STREAM, _INPUT_STREAM, _NOISE_STREAM = 0, 1, 2


@dataclass(frozen=True)
class CampaignConfig:
    trajectories: int = 1000
    duration: float = 5.0
    ts: float = 0.05
    domega: float = 0.05
    ddelta_deg: float = 20.0
    input_law: str = "uniform"
    input_amplitude: float = 0.3
    dwell: int = 1
    seed: int = 2019
    topology: str = "fault1"
    mode: str = "first_order"
    dt: float = 1e-3
    noise_std: float = 0.0
    t_f: float = 0.05
    freq_mode: str = "machine"

    def __post_init__(self):
        if self.trajectories < 0:
            raise ConfigError("trajectory count must be >= 0")
        if self.duration <= 0 or self.ts <= 0 or self.dt <= 0:
            raise ConfigError("duration, ts and dt must be positive")
        if self.domega <= 0 or self.ddelta_deg <= 0:
            raise ConfigError("perturbation ranges must have positive width")
        if self.input_law not in ("uniform", "zero"):
            raise ConfigError(f"unknown input law {self.input_law!r}")
        if self.dwell < 1:
            raise ConfigError("dwell must be >= 1 sample")
        ratio = self.ts / self.dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("ts must be an integer multiple of dt")

    @classmethod
    def from_config(cls, section: dict, measurement: dict | None = None) -> CampaignConfig:
        section = dict(section)
        keys = set(cls.__dataclass_fields__)
        unknown = set(section) - keys
        if unknown:
            raise ConfigError(f"unknown campaign keys: {sorted(unknown)}")
        for key in ("t_f", "mode"):
            if measurement and key in measurement:
                section.setdefault("freq_mode" if key == "mode" else key, measurement[key])
        return cls(**section)

    @property
    def samples(self) -> int:
        return int(round(self.duration / self.ts)) + 1


def _generator(seed: int, stream: int, index: int) -> np.random.Generator:
    # key selects (seed, stream); the trajectory index sits in the high counter word
    bits = np.random.Philox(key=np.array([seed, stream], dtype=np.uint64),
                            counter=np.array([0, 0, 0, index], dtype=np.uint64))
    return np.random.Generator(bits)


def sample_initial_conditions(n: int, ranges, seed: int, n_machines: int = 3, *, start: int = 0):
    """``n`` draws of (angle offsets rad, speed offsets pu), uniform in ``±ranges``.

    ``ranges`` is ``(ddelta_deg, domega)``. Draw ``k`` depends only on
    ``(seed, start + k)``.
    """
    ddelta_deg, domega = ranges
    out = []
    for k in range(n):
        g = _generator(seed, _IC_STREAM, start + k)
        dd = g.uniform(-1.0, 1.0, n_machines) * math.radians(ddelta_deg)
        dw = g.uniform(-1.0, 1.0, n_machines) * domega
        out.append((dd, dw))
    return out


def input_sequence(cfg: CampaignConfig, index: int) -> np.ndarray:
    """Commands ``u[0..T-1]``; ``u[k]`` is in effect over ``(t_{k-1}, t_k]`` and ``u[0] = 0``."""
    u = np.zeros(cfg.samples)
    if cfg.input_law == "zero" or cfg.samples < 2:
        return u
    g = _generator(cfg.seed, _INPUT_STREAM, index)
    levels = g.uniform(-cfg.input_amplitude, cfg.input_amplitude, math.ceil((cfg.samples - 1) / cfg.dwell))
    u[1:] = np.repeat(levels, cfg.dwell)[: cfg.samples - 1]
    return u


@dataclass
class TrajectoryRecord:
    id: int
    seed: int
    ic: np.ndarray
    t: np.ndarray
    y: np.ndarray
    u: np.ndarray
    truncated: bool = False

    def __post_init__(self):
        if not (len(self.t) == len(self.y) == len(self.u)):
            raise ValueError("trajectory arrays must have equal length")


@dataclass
class Dataset:
    manifest: dict
    records: list = field(default_factory=list)

    @property
    def content_hash(self) -> str:
        return content_hash(self.records)


def _campaign_model(model: GridModel, cfg: CampaignConfig):
    post = post_fault_topology(model, cfg.topology)
    return solve_equilibrium(post)


def simulate_chunk(model: GridModel, params: DsmsParams, cfg: CampaignConfig, ids) -> list[TrajectoryRecord]:
    """Simulate a batch of trajectories side by side (vectorised over the batch)."""
    ids = list(ids)
    if not ids:
        return []
    eq_model, eq = _campaign_model(model, cfg)
    n = len(eq_model.machines)
    batch = len(ids)
    ics = [sample_initial_conditions(1, (cfg.ddelta_deg, cfg.domega), cfg.seed, n, start=i)[0] for i in ids]
    delta = eq.delta[None, :] + np.array([ic[0] for ic in ics])
    domega = np.array([ic[1] for ic in ics])
    state = GridState(delta, domega, 0.0)
    sim = GridSimulator(eq_model, state, dt=cfg.dt, t_f=cfg.t_f, freq_mode=cfg.freq_mode, on_divergence="flag")
    act = Actuator.create(params, shape=(batch,))
    if params.mode == "full_ode":
        raise ConfigError("campaigns support the ideal and first_order actuator modes")
    scale = params.mva / eq_model.base_mva
    u = np.array([input_sequence(cfg, i) for i in ids])
    per = int(round(cfg.ts / cfg.dt))
    y = np.empty((batch, cfg.samples))
    y[:, 0] = sim.frequency()
    for k in range(1, cfg.samples):
        cmd = u[:, k]
        for _ in range(per):
            p, act = actuator_step(act, cmd, cfg.dt)
            sim.advance(p * scale)
        y[:, k] = sim.frequency()
    if cfg.noise_std > 0:
        for row, i in enumerate(ids):
            y[row] += _generator(cfg.seed, _NOISE_STREAM, i).normal(0.0, cfg.noise_std, cfg.samples)
    t = np.arange(cfg.samples) * cfg.ts
    # keep only samples taken strictly before a divergence
    ends = np.where(sim.diverged, np.ceil(np.nan_to_num(sim.diverged_at) / cfg.ts - 1e-9), cfg.samples).astype(int)
    out = []
    for row, i in enumerate(ids):
        end = ends[row]
        ic = np.concatenate(ics[row])
        out.append(TrajectoryRecord(i, cfg.seed, ic, t[:end].copy(), y[row, :end].copy(), u[row, :end].copy(),
                                    bool(sim.diverged[row])))
    return out


def _chunk_worker(args):
    model, params, cfg, ids = args
    return simulate_chunk(model, params, cfg, ids)


def job_count(jobs: int | None = None) -> int:
    cap = os.environ.get("KGMPC_JOBS")
    j = jobs if jobs is not None else (os.cpu_count() or 1)
    if cap:
        try:
            j = min(j, int(cap))
        except ValueError:
            raise ConfigError(f"KGMPC_JOBS must be an integer, got {cap!r}") from None
    return max(1, j)


def run_campaign(cfg: CampaignConfig, model: GridModel, params: DsmsParams | None = None, *,
                 jobs: int | None = None, meta: dict | None = None) -> Dataset:
    """Simulate the whole campaign; records are ordered by trajectory id."""
    params = params or DsmsParams(mode=cfg.mode)
    if params.mode != cfg.mode:
        params = DsmsParams(**{**asdict(params), "mode": cfg.mode})
    if model.dsms_bus is None:
        raise ConfigError("campaign model has no storage bus")
    _campaign_model(model, cfg)  # fail early if the operating point cannot be solved
    chunks = [range(s, min(s + CHUNK, cfg.trajectories)) for s in range(0, cfg.trajectories, CHUNK)]
    jobs = min(job_count(jobs), max(1, len(chunks)))
    work = [(model, params, cfg, c) for c in chunks]
    if jobs == 1:
        parts = [_chunk_worker(w) for w in work]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_chunk_worker, work))
    records = [r for part in parts for r in part]
    manifest = {"format": "kgmpc-dataset-1", "generator": f"kgmpc {__version__}", "model": model.name}
    manifest.update({f"campaign.{k}": v for k, v in asdict(cfg).items()})
    manifest.update({f"dsms.{k}": v for k, v in asdict(params).items()})
    manifest.update(meta or {})
    manifest["truncated"] = sum(r.truncated for r in records)
    manifest["records"] = len(records)
    manifest["hash"] = content_hash(records)
    return Dataset(manifest, records)


# -- snapshots -----------------------------------------------------------------

def assemble_snapshots(ds: Dataset, spec: DelaySpec) -> SnapshotSet:
    """Lifted snapshot pairs from every trajectory; windows never cross records.

    The input column paired with window ``i -> i+1`` is ``u[i + nd]``, the
    command applied over the step that the newest entry of ``Z+`` describes.
    """
    zs, zn, us, owner = [], [], [], []
    skipped = 0
    for rec in ds.records:
        if len(rec.y) < spec.nd + 1:
            skipped += 1
            continue
        w = windows(rec.y, rec.u, spec)
        lifted = lift(w, spec)
        zs.append(lifted[:-1])
        zn.append(lifted[1:])
        us.append(np.asarray(rec.u, dtype=float).reshape(len(rec.u), -1)[spec.nd:])
        owner.append(np.full(len(w) - 1, rec.id))
    n = spec.lifted_size
    if zs:
        z, z_next, u = np.vstack(zs).T, np.vstack(zn).T, np.vstack(us).T
        traj = np.concatenate(owner)
    else:
        z, z_next, u, traj = np.zeros((n, 0)), np.zeros((n, 0)), np.zeros((spec.m, 0)), np.zeros(0, dtype=int)
    meta = {"nd": spec.nd, "ts": spec.ts, "p": spec.p, "norm_index": spec.norm_index,
            "campaign": ds.manifest.get("hash", ""), "skipped": skipped}
    return SnapshotSet(z, z_next, u, meta, traj)


def prediction_rmse(pred: LinearPredictor, ds: Dataset, steps: int = 10) -> tuple[float, int]:
    """Pooled ``steps``-ahead relative RMSE (percent) from each record's first window.

    The predictor starts from the lifted first ``nd`` samples and is driven by
    the recorded inputs; errors and true values are pooled over all records
    long enough to provide the window plus ``steps`` samples. Returns the RMSE
    and the number of records used.
    """
    spec = pred.spec
    pairs = []
    for rec in ds.records:
        if len(rec.y) < spec.nd + steps:
            continue
        z0 = lift(windows(rec.y[:spec.nd], rec.u[:spec.nd], spec)[0], spec)
        _, yp = predict(pred, z0, rec.u[spec.nd:spec.nd + steps])
        pairs.append((yp[1:, 0], rec.y[spec.nd:spec.nd + steps]))
    if not pairs:
        raise ValueError("no record is long enough for the requested horizon")
    p = np.concatenate([a for a, _ in pairs])
    t = np.concatenate([b for _, b in pairs])
    return relative_rmse(p, t), len(pairs)


# -- persistence ---------------------------------------------------------------

def _record_csv(rec: TrajectoryRecord) -> str:
    buf = io.StringIO()
    ic = " ".join(repr(float(v)) for v in rec.ic)
    buf.write(f"# id={rec.id} seed={rec.seed} truncated={int(rec.truncated)} ic={ic}\n")
    buf.write("t,y,u\n")
    for t, y, u in zip(rec.t, rec.y, rec.u):
        buf.write(f"{float(t)!r},{float(y)!r},{float(u)!r}\n")
    return buf.getvalue()


def _parse_record(text: str, name: str) -> TrajectoryRecord:
    try:
        lines = text.splitlines()
        meta = dict(item.split("=", 1) for item in lines[0][2:].split(" ic=")[0].split())
        ic = np.array([float(v) for v in lines[0].split(" ic=", 1)[1].split()])
        if lines[1] != "t,y,u":
            raise ValueError("bad header")
        rows = np.array([[float(v) for v in line.split(",")] for line in lines[2:]]).reshape(-1, 3)
        return TrajectoryRecord(int(meta["id"]), int(meta["seed"]), ic, rows[:, 0], rows[:, 1], rows[:, 2],
                                bool(int(meta["truncated"])))
    except (IndexError, KeyError, ValueError) as exc:
        raise IntegrityError(f"{name}: malformed trajectory file ({exc})") from exc


def content_hash(records) -> str:
    h = hashlib.sha256()
    for rec in sorted(records, key=lambda r: r.id):
        h.update(_record_csv(rec).encode())
    return h.hexdigest()


def _format_value(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def save_dataset(ds: Dataset, path, spec: DelaySpec | None = None) -> None:
    """Write ``manifest.txt``, ``traj_<id>.csv`` and ``snapshots.bin``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = dict(ds.manifest)
    manifest["hash"] = content_hash(ds.records)
    manifest["records"] = len(ds.records)
    for rec in ds.records:
        (path / f"traj_{rec.id:05d}.csv").write_text(_record_csv(rec))
    if spec is None:
        spec = DelaySpec(nd=int(manifest.get("koopman.nd", 5)), ts=float(manifest.get("campaign.ts", 0.05)))
    save_snapshots(assemble_snapshots(ds, spec), path / "snapshots.bin")
    lines = [f"{k} = {_format_value(v)}" for k, v in sorted(manifest.items())]
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    """Manifest key/values as strings; trajectory files are not touched."""
    file = Path(path) / "manifest.txt"
    try:
        text = file.read_text()
    except OSError as exc:
        raise IntegrityError(f"cannot read {file}: {exc}") from exc
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if " = " not in line:
            raise IntegrityError(f"{file}: malformed line {line!r}")
        k, v = line.split(" = ", 1)
        out[k] = v
    return out


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest = read_manifest(path)
    try:
        count = int(manifest["records"])
        expected = manifest["hash"]
    except (KeyError, ValueError) as exc:
        raise IntegrityError(f"{path}: manifest lacks record count or hash") from exc
    files = sorted(path.glob("traj_*.csv"))
    if len(files) != count:
        raise IntegrityError(f"{path}: expected {count} trajectory files, found {len(files)}")
    records = [_parse_record(f.read_text(), f.name) for f in files]
    records.sort(key=lambda r: r.id)
    actual = content_hash(records)
    if actual != expected:
        raise IntegrityError(f"{path}: content hash mismatch ({actual[:12]} != {expected[:12]})")
    return Dataset(manifest, records)
