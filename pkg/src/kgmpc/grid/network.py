"""Kron-reduced network and the algebraic network solve."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from ..errors import ConvergenceError, NetworkError
from .model import GridModel


@dataclass
class ReducedNetwork:
    """Admittance matrix over machine internal nodes followed by retained buses."""

    y: np.ndarray
    nodes: tuple[str, ...]
    n_machines: int
    retained: tuple[int, ...]
    ymm: np.ndarray = field(init=False, repr=False)
    ymr: np.ndarray = field(init=False, repr=False)
    yrm: np.ndarray = field(init=False, repr=False)
    yrr: np.ndarray = field(init=False, repr=False)
    zrr: np.ndarray = field(init=False, repr=False)
    w: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = self.n_machines
        self.ymm = self.y[:n, :n]
        self.ymr = self.y[:n, n:]
        self.yrm = self.y[n:, :n]
        self.yrr = self.y[n:, n:]
        if self.yrr.size:
            self.zrr = np.linalg.inv(self.yrr)
            self.w = self.zrr @ self.yrm
        else:
            self.zrr = np.zeros((0, 0), dtype=complex)
            self.w = np.zeros((0, n), dtype=complex)

    @property
    def g(self) -> np.ndarray:
        return self.y.real

    @property
    def b(self) -> np.ndarray:
        return self.y.imag

    @property
    def dimension(self) -> int:
        return self.y.shape[0]

    def retained_index(self, bus: int) -> int:
        return self.retained.index(bus)

    def machine_only(self) -> np.ndarray:
        """Further eliminate the retained buses (valid with zero injections)."""
        if not self.retained:
            return self.ymm.copy()
        return self.ymm - self.ymr @ self.w


def augmented_admittance(model: GridModel) -> tuple[np.ndarray, list[str]]:
    """Bus admittance matrix extended with one internal node per machine.

    Internal nodes come first, then buses in model order.
    """
    nm = len(model.machines)
    nb = len(model.buses)
    y = np.zeros((nm + nb, nm + nb), dtype=complex)
    y[nm:, nm:] = model.admittance_matrix()
    index = model.bus_index
    for k, m in enumerate(model.machines):
        ym = 1.0 / model.machine_impedance(m)
        j = nm + index[m.bus]
        y[k, k] += ym
        y[j, j] += ym
        y[k, j] -= ym
        y[j, k] -= ym
    labels = [f"machine:{m.name}" for m in model.machines]
    labels += [f"bus:{b.id}" for b in model.buses]
    return y, labels


def kron_reduce(y: np.ndarray, keep) -> np.ndarray:
    """Eliminate every node not listed in ``keep`` (order of ``keep`` preserved)."""
    keep = list(keep)
    elim = [k for k in range(y.shape[0]) if k not in set(keep)]
    yrr = y[np.ix_(keep, keep)]
    if not elim:
        return yrr.copy()
    yee = y[np.ix_(elim, elim)]
    yre = y[np.ix_(keep, elim)]
    yer = y[np.ix_(elim, keep)]
    lu = scipy.linalg.lu_factor(yee, check_finite=True)
    return yrr - yre @ scipy.linalg.lu_solve(lu, yer)


def _isolated_groups(y: np.ndarray, keep: list[int], elim: list[int]) -> list[int]:
    """Eliminated nodes whose component never touches a kept node."""
    mask = np.abs(y) > 0
    np.fill_diagonal(mask, False)
    rows, cols = np.nonzero(mask)
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=y.shape)
    _, labels = connected_components(graph, directed=False)
    kept_labels = {labels[k] for k in keep}
    return [e for e in elim if labels[e] not in kept_labels]


def build_reduced_network(model: GridModel) -> ReducedNetwork:
    y, labels = augmented_admittance(model)
    nm = len(model.machines)
    index = model.bus_index
    keep = list(range(nm)) + [nm + index[b] for b in model.retained]
    elim = [k for k in range(y.shape[0]) if k not in set(keep)]
    if elim:
        yee = y[np.ix_(elim, elim)]
        bad = _isolated_groups(y, keep, elim)
        singular = np.linalg.cond(yee) > 1e14
        if bad or singular:
            names = [labels[k] for k in (bad or elim)]
            raise NetworkError(f"eliminated subnetwork is singular: {names}", names)
    y_red = kron_reduce(y, keep)
    nodes = tuple(labels[k] for k in keep)
    return ReducedNetwork(y_red, nodes, nm, tuple(model.retained))


def electrical_power(net: ReducedNetwork, emfs, angles) -> np.ndarray:
    """Active power injected at every node of ``net``.

    ``emfs`` and ``angles`` hold voltage magnitudes and angles for all nodes
    (machine internal nodes, then retained buses).
    """
    e = np.asarray(emfs, dtype=float)
    a = np.asarray(angles, dtype=float)
    n = net.dimension
    if e.shape[-1] != n or a.shape[-1] != n:
        raise ValueError(f"expected {n} node values, got {e.shape[-1]} and {a.shape[-1]}")
    diff = a[..., :, None] - a[..., None, :]
    terms = net.g * np.cos(diff) + net.b * np.sin(diff)
    return e * np.einsum("...ij,...j->...i", terms, e)


def solve_network(net: ReducedNetwork, emfs, injections=None, *, tol=1e-8, max_iter=50, on_fail="raise",
                  v_low=0.0):
    """Retained-bus voltages for given machine EMF phasors.

    Machines act as Norton sources behind their internal admittance; retained
    buses carry constant-power ``injections`` (complex, system base). Below
    the breakpoint ``v_low`` (pu magnitude) an injection scales with
    ``|V|^2``, i.e. it turns into a constant admittance, so that a bolted
    fault next to the bus cannot demand power the network cannot carry.
    The injection current is updated by fixed-point iteration until the power
    mismatch is below ``tol``. Entries the fixed point has not settled after
    ``max_iter`` sweeps (weak buses contract slowly) get Newton steps.
    With ``on_fail='nan'`` batch entries that still fail come back as NaN
    instead of raising.
    """
    e = np.asarray(emfs, dtype=complex)
    if e.shape[-1] != net.n_machines:
        raise ValueError("emf vector does not match machine count")
    nr = len(net.retained)
    v_open = -(e @ net.w.T)
    if injections is None or nr == 0:
        return v_open
    s = np.broadcast_to(np.asarray(injections, dtype=complex), v_open.shape)
    if not np.any(s):
        return v_open
    v = v_open
    done = np.zeros(v.shape, dtype=bool)
    for _ in range(max_iter):
        current = np.conj(effective_injection(s, v, v_low) / v)
        v_new = v_open + current @ net.zrr.T
        if v_low > 0:
            mismatch = np.abs(_power_mismatch(net, v_open, effective_injection(s, v_new, v_low), v_new))
        else:
            # power mismatch of v_new follows from the current it was built with
            mismatch = np.abs(s) * np.abs(v_new / v - 1.0)
        v = np.where(done, v, v_new)
        done |= mismatch <= tol
        if done.all():
            return v
        if not np.all(np.isfinite(v)):
            break
    return _newton_polish(net, v_open, s, v, tol, on_fail=on_fail, v_low=v_low)


def effective_injection(s, v, v_low=0.0):
    """Constant power above ``v_low``, constant admittance below it."""
    if v_low <= 0:
        return s
    return s * np.minimum(1.0, np.abs(v) ** 2 / v_low ** 2)


def _power_mismatch(net, v_open, s, v):
    current = (v - v_open) @ net.yrr.T
    return v * np.conj(current) - s


def _newton_polish(net, v_open, s, v, tol, max_iter=20, on_fail="raise", v_low=0.0):
    """Newton iterations on ``V - v_open - Zrr conj(S(V) / V) = 0`` in real form."""
    nr = v.shape[-1]
    eye = np.eye(nr)
    if not np.all(np.isfinite(v)):
        v = np.where(np.isfinite(v), v, v_open)

    def residual(v):
        return np.max(np.abs(_power_mismatch(net, v_open, effective_injection(s, v, v_low), v)), axis=-1)

    for _ in range(max_iter):
        mismatch = residual(v)
        if np.all(mismatch <= tol):
            return v
        low = np.abs(v) < v_low
        f = v - v_open - np.conj(effective_injection(s, v, v_low) / v) @ net.zrr.T
        # constant-power columns depend on conj(V), constant-admittance ones on V
        m = net.zrr * np.where(low, 0.0, np.conj(s) / np.conj(v) ** 2)[..., None, :]
        inv_low2 = 1.0 / v_low ** 2 if v_low > 0 else 0.0
        a = net.zrr * np.where(low, np.conj(s) * inv_low2, 0.0)[..., None, :]
        jac = np.block([[eye - a.real + m.real, a.imag + m.imag], [m.imag - a.imag, eye - a.real - m.real]])
        rhs = -np.concatenate([f.real, f.imag], axis=-1)
        try:
            step = np.linalg.solve(jac, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            break
        v_next = v + step[..., :nr] + 1j * step[..., nr:]
        # converged entries stay put
        v = np.where((mismatch <= tol)[..., None], v, v_next)
        v = np.where(np.isfinite(v), v, v_open)
    mismatch = residual(v)
    failed = ~(mismatch <= tol)
    if not failed.any():
        return v
    if on_fail == "nan":
        return np.where(failed[..., None], np.nan + 0j, v)
    residual = float(np.max(np.where(failed, mismatch, 0.0)))
    raise ConvergenceError(f"network solve did not converge (residual {residual:.3g})", residual)


def machine_power(net: ReducedNetwork, e: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Electrical power of each machine given EMF phasors and retained voltages."""
    current = e @ net.ymm.T
    if net.retained:
        current = current + v @ net.ymr.T
    return np.real(e * np.conj(current))
