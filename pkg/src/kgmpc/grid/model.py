"""Static description of a classical-model transmission grid."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from ..errors import ConfigError, NetworkError

DEFAULT_FAULT_ADMITTANCE = complex(1e4, -1e4)


@dataclass(frozen=True)
class Bus:
    id: int
    kv: float = 1.0


@dataclass(frozen=True)
class Branch:
    """Pi-model series branch; ``b`` is the total line charging."""

    id: str
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    in_service: bool = True

    @property
    def admittance(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class Machine:
    """Classical machine: constant EMF behind ``r + j xd``.

    ``h``, ``d``, ``r`` and ``xd`` are on the machine rating ``mva``; ``e`` and
    ``pm`` are on the system base.
    """

    name: str
    bus: int
    h: float
    d: float
    xd: float
    e: float
    pm: float
    r: float = 0.0
    mva: float | None = None
    angle_guess: float = 0.0


@dataclass(frozen=True)
class Load:
    """Constant-impedance load given by its complex power at 1 pu voltage."""

    bus: int
    s: complex

    @property
    def admittance(self) -> complex:
        return self.s.conjugate()


@dataclass(frozen=True)
class GridModel:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    machines: tuple[Machine, ...]
    loads: tuple[Load, ...] = ()
    base_mva: float = 100.0
    f0: float = 60.0
    retained: tuple[int, ...] = ()
    dsms_bus: int | None = None
    slack: int = 0
    faults: tuple[tuple[int, complex], ...] = ()
    injections: tuple[tuple[int, complex], ...] = ()
    fault_admittance: complex = DEFAULT_FAULT_ADMITTANCE
    # retained-bus injections act as constant admittance below this |V| (pu)
    pq_breakpoint: float = 0.0
    name: str = "grid"

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "machines", tuple(self.machines))
        object.__setattr__(self, "loads", tuple(self.loads))
        retained = tuple(self.retained)
        if self.dsms_bus is not None and self.dsms_bus not in retained:
            retained = retained + (self.dsms_bus,)
        object.__setattr__(self, "retained", retained)
        self._validate()

    # -- validation -------------------------------------------------------

    def _validate(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate bus ids")
        known = set(ids)
        branch_ids = [br.id for br in self.branches]
        if len(set(branch_ids)) != len(branch_ids):
            raise ConfigError("duplicate branch ids")
        for br in self.branches:
            if br.from_bus not in known or br.to_bus not in known:
                raise ConfigError(f"branch {br.id} references unknown bus")
            if math.hypot(br.r, br.x) <= 0:
                raise ConfigError(f"branch {br.id} has zero impedance")
        if not self.machines:
            raise ConfigError("grid model needs at least one machine")
        for m in self.machines:
            if m.bus not in known:
                raise ConfigError(f"machine {m.name} at unknown bus {m.bus}")
            if m.h <= 0 or m.e <= 0 or math.hypot(m.r, m.xd) <= 0:
                raise ConfigError(f"machine {m.name}: H, E and |z| must be positive")
        for ld in self.loads:
            if ld.bus not in known:
                raise ConfigError(f"load at unknown bus {ld.bus}")
        for bus in self.retained:
            if bus not in known:
                raise ConfigError(f"retained bus {bus} does not exist")
        if not 0 <= self.slack < len(self.machines):
            raise ConfigError("slack index out of range")
        self._check_connected()

    def _check_connected(self):
        index = self.bus_index
        rows, cols = [], []
        for br in self.branches:
            if br.in_service:
                rows.append(index[br.from_bus])
                cols.append(index[br.to_bus])
        n = len(self.buses)
        graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        count, labels = connected_components(graph, directed=False)
        if count > 1:
            main = labels[index[self.machines[0].bus]]
            islanded = [b.id for b, lab in zip(self.buses, labels) if lab != main]
            raise NetworkError(f"network is islanded; buses {islanded} are cut off", islanded)

    # -- derived quantities -------------------------------------------------

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    @property
    def omega0(self) -> float:
        return 2.0 * math.pi * self.f0

    def machine_scale(self, m: Machine) -> float:
        """Ratio of machine rating to system base."""
        return (m.mva if m.mva else self.base_mva) / self.base_mva

    @cached_property
    def h_sys(self) -> np.ndarray:
        return np.array([m.h * self.machine_scale(m) for m in self.machines])

    @cached_property
    def d_sys(self) -> np.ndarray:
        return np.array([m.d * self.machine_scale(m) for m in self.machines])

    @cached_property
    def emf(self) -> np.ndarray:
        return np.array([m.e for m in self.machines])

    @cached_property
    def pm(self) -> np.ndarray:
        return np.array([m.pm for m in self.machines])

    def machine_impedance(self, m: Machine) -> complex:
        return complex(m.r, m.xd) / self.machine_scale(m)

    @property
    def inertia_sum(self) -> float:
        return float(self.h_sys.sum())

    def branch(self, branch_id: str) -> Branch:
        for br in self.branches:
            if br.id == branch_id:
                return br
        raise KeyError(branch_id)

    def with_pm(self, pm) -> GridModel:
        machines = tuple(replace(m, pm=float(p)) for m, p in zip(self.machines, pm))
        return replace(self, machines=machines)

    def with_branch_status(self, branch_id: str, in_service: bool) -> GridModel:
        self.branch(branch_id)
        branches = tuple(
            replace(br, in_service=in_service) if br.id == branch_id else br
            for br in self.branches
        )
        return replace(self, branches=branches)

    def shunt_admittances(self) -> dict[int, complex]:
        """Per-bus shunt admittance from loads, faults and line charging."""
        shunts: dict[int, complex] = {}
        for ld in self.loads:
            shunts[ld.bus] = shunts.get(ld.bus, 0j) + ld.admittance
        for bus, y in self.faults:
            shunts[bus] = shunts.get(bus, 0j) + y
        return shunts

    def admittance_matrix(self) -> np.ndarray:
        """Bus admittance matrix of the in-service network (no machine nodes)."""
        n = len(self.buses)
        index = self.bus_index
        y = np.zeros((n, n), dtype=complex)
        for br in self.branches:
            if not br.in_service:
                continue
            i, j = index[br.from_bus], index[br.to_bus]
            ys = br.admittance
            half = 0.5j * br.b
            y[i, i] += ys + half
            y[j, j] += ys + half
            y[i, j] -= ys
            y[j, i] -= ys
        for bus, ysh in self.shunt_admittances().items():
            y[index[bus], index[bus]] += ysh
        return y


@dataclass
class GridState:
    """Rotor angles (rad) and speed deviations (pu) at time ``t``.

    Arrays may carry leading batch dimensions; the machine axis is last.
    """

    delta: np.ndarray
    domega: np.ndarray
    t: float = 0.0
    v_retained: np.ndarray | None = field(default=None)

    def copy(self) -> GridState:
        v = None if self.v_retained is None else np.array(self.v_retained)
        return GridState(np.array(self.delta), np.array(self.domega), self.t, v)
