"""Receding-horizon control on a lifted linear predictor.

The finite-horizon problem

    min  sum_{i=0}^{Np-1} (z_i - z_ref)' Q (z_i - z_ref) + u_i' R u_i
    s.t. z_{i+1} = A z_i + B u_i,   -b <= u_i <= b

is condensed into a box QP ``1/2 u'Hu + f'u + c`` over the stacked inputs and
solved with a primal active-set method.
"""

from __future__ import annotations

import csv
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, QpIterationError
from .koopman import LinearPredictor, lift


@dataclass(frozen=True)
class MpcConfig:
    np: int = 10
    w: float = 3e3
    r: float = 1.0
    b: float = 0.3
    ts: float = 0.05
    warm_start: bool = True
    terminal_cost: bool = False
    weight_all_delays: bool = False
    # lifted reference; None means newest output 0 and constant coordinate 1
    z_ref: tuple | None = None

    def __post_init__(self):
        if self.z_ref is not None:
            object.__setattr__(self, "z_ref", tuple(float(v) for v in self.z_ref))
        if self.np < 1:
            raise ConfigError("horizon np must be >= 1")
        if self.w <= 0 or self.r <= 0 or self.b <= 0 or self.ts <= 0:
            raise ConfigError("w, r, b and ts must be positive")

    @classmethod
    def from_config(cls, section: dict) -> MpcConfig:
        keys = set(cls.__dataclass_fields__)
        unknown = set(section) - keys
        if unknown:
            raise ConfigError(f"unknown mpc keys: {sorted(unknown)}")
        return cls(**section)

    def weight(self, pred: LinearPredictor) -> np.ndarray:
        if self.weight_all_delays:
            rows = np.arange(pred.spec.nd * pred.spec.p)
            c = np.zeros((len(rows), pred.n))
            c[np.arange(len(rows)), rows] = 1.0
        else:
            c = pred.c
        return self.w * c.T @ c

    def reference(self, pred: LinearPredictor) -> np.ndarray:
        if self.z_ref is not None:
            if len(self.z_ref) != pred.n:
                raise ConfigError(f"z_ref has {len(self.z_ref)} entries, predictor state has {pred.n}")
            return np.array(self.z_ref)
        z = np.zeros(pred.n)
        z[-1] = 1.0
        return z


@dataclass(frozen=True)
class CondensedQp:
    h: np.ndarray
    f: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    const: float = 0.0

    def objective(self, u) -> float:
        u = np.asarray(u, dtype=float)
        return float(0.5 * u @ self.h @ u + self.f @ u + self.const)


class Condenser:
    """Horizon matrices for one (predictor, config) pair.

    Everything that does not depend on ``z0`` is precomputed so that
    :meth:`qp` costs one matrix-vector product.
    """

    def __init__(self, pred: LinearPredictor, cfg: MpcConfig):
        n, m = pred.b.shape
        steps = cfg.np + 1 if cfg.terminal_cost else cfg.np
        q = cfg.weight(pred)
        powers = [np.eye(n)]
        for _ in range(steps):
            powers.append(pred.a @ powers[-1])
        a_bar = np.vstack(powers[:steps])
        gamma = np.zeros((steps * n, cfg.np * m))
        for i in range(1, steps):
            for j in range(min(i, cfg.np)):
                gamma[i * n:(i + 1) * n, j * m:(j + 1) * m] = powers[i - 1 - j] @ pred.b
        q_bar = np.kron(np.eye(steps), q)
        r_bar = np.kron(np.eye(cfg.np), cfg.r * np.eye(m))
        gq = gamma.T @ q_bar
        self.cfg = cfg
        self.gamma = gamma
        self.a_bar = a_bar
        self.q_bar = q_bar
        self.r_bar = r_bar
        self.h = 2.0 * (gq @ gamma + r_bar)
        self.h = 0.5 * (self.h + self.h.T)
        self._fz = 2.0 * gq @ a_bar
        self._zref = np.tile(cfg.reference(pred), steps)
        self._fr = 2.0 * gq @ self._zref
        self.lb = -cfg.b * np.ones(cfg.np * m)
        self.ub = cfg.b * np.ones(cfg.np * m)

    def qp(self, z0) -> CondensedQp:
        z0 = np.asarray(z0, dtype=float)
        e = self.a_bar @ z0 - self._zref
        return CondensedQp(self.h, self._fz @ z0 - self._fr, self.lb, self.ub, float(e @ self.q_bar @ e))

    def rollout_cost(self, z0, u) -> float:
        """Cost by explicit simulation of the predictor (reference path)."""
        u = np.asarray(u, dtype=float).reshape(self.cfg.np, -1)
        z = self.a_bar @ np.asarray(z0, dtype=float) + self.gamma @ u.ravel() - self._zref
        return float(z @ self.q_bar @ z + u.ravel() @ self.r_bar @ u.ravel())


_CONDENSERS: dict = {}


def condenser(pred: LinearPredictor, cfg: MpcConfig) -> Condenser:
    key = (id(pred), cfg)
    hit = _CONDENSERS.get(key)
    if hit is None or hit[0] is not pred:
        if len(_CONDENSERS) > 32:
            _CONDENSERS.clear()
        hit = (pred, Condenser(pred, cfg))
        _CONDENSERS[key] = hit
    return hit[1]


def condense(pred: LinearPredictor, cfg: MpcConfig, z0) -> CondensedQp:
    return condenser(pred, cfg).qp(z0)


@dataclass
class KktReport:
    residual: float
    iterations: int
    changes: int


def kkt_residual(qp: CondensedQp, u) -> float:
    """Largest violation of stationarity / complementarity / feasibility."""
    g = qp.h @ u + qp.f
    at_ub = u >= qp.ub
    at_lb = u <= qp.lb
    r = np.where(at_ub, np.maximum(g, 0.0), np.where(at_lb, np.maximum(-g, 0.0), np.abs(g)))
    feas = np.maximum(np.maximum(u - qp.ub, qp.lb - u), 0.0)
    return float(np.max(np.maximum(r, feas))) if u.size else 0.0


def solve_box_qp(qp: CondensedQp, warm=None, *, max_iter=None) -> tuple[np.ndarray, KktReport]:
    """Primal active-set method for ``min 1/2 u'Hu + f'u, lb <= u <= ub``.

    The working set starts from the coordinates of the (clipped) warm start
    that sit on a bound. Releases pick the most violated multiplier, blocking
    constraints the shortest step; ties go to the lowest index.
    """
    h, f, lb, ub = qp.h, qp.f, qp.lb, qp.ub
    dim = f.size
    u = np.zeros(dim) if warm is None else np.clip(np.asarray(warm, dtype=float), lb, ub)
    # 0 free, +1 at upper bound, -1 at lower bound
    state = np.where(u >= ub, 1, np.where(u <= lb, -1, 0))
    u = np.where(state > 0, ub, np.where(state < 0, lb, u))
    scale = 1.0 + np.max(np.abs(h)) * np.max(np.abs(np.concatenate([lb, ub]))) + np.max(np.abs(f))
    tol = 1e-13 * scale
    cap = 100 * dim if max_iter is None else max_iter
    changes = 0
    for it in range(cap + 1):
        free = np.flatnonzero(state == 0)
        target = u.copy()
        if free.size:
            fixed = np.flatnonzero(state != 0)
            rhs = -(f[free] + h[np.ix_(free, fixed)] @ u[fixed])
            target[free] = np.linalg.solve(h[np.ix_(free, free)], rhs)
        step = target - u
        alpha, block = 1.0, -1
        for i in free:
            if step[i] > 0 and target[i] > ub[i]:
                a = (ub[i] - u[i]) / step[i]
            elif step[i] < 0 and target[i] < lb[i]:
                a = (lb[i] - u[i]) / step[i]
            else:
                continue
            if a < alpha:
                alpha, block = a, i
        if block >= 0:
            u = u + alpha * step
            state[block] = 1 if step[block] > 0 else -1
            u[block] = ub[block] if state[block] > 0 else lb[block]
            changes += 1
            continue
        u = target
        g = h @ u + f
        viol = np.where(state > 0, g, np.where(state < 0, -g, 0.0))
        worst = int(np.argmax(viol)) if dim else 0
        if dim == 0 or viol[worst] <= tol:
            return u, KktReport(kkt_residual(qp, u), it, changes)
        state[worst] = 0
        changes += 1
    raise QpIterationError(f"active-set iteration cap {cap} exceeded", u)


# -- closed loop ---------------------------------------------------------------

@dataclass
class StepResult:
    u: float
    status: str
    iterations: int = 0
    kkt: float = 0.0
    solve_us: float = 0.0


@dataclass
class ControllerState:
    pred: LinearPredictor
    cfg: MpcConfig
    y_buf: deque = field(default_factory=deque)
    u_buf: deque = field(default_factory=deque)
    last_u: float = 0.0
    warm: np.ndarray | None = None
    t_last: float | None = None
    log: list = field(default_factory=list)

    def __post_init__(self):
        nd = self.pred.spec.nd
        self.y_buf = deque(self.y_buf, maxlen=nd)
        self.u_buf = deque(self.u_buf, maxlen=nd)
        if abs(self.cfg.ts - self.pred.spec.ts) > 1e-12:
            raise ConfigError("controller and predictor sampling periods differ")

    @property
    def ready(self) -> bool:
        return len(self.y_buf) == self.pred.spec.nd

    def reset(self):
        self.y_buf.clear()
        self.u_buf.clear()
        self.warm = None

    def lifted(self) -> np.ndarray:
        zeta = np.concatenate([np.ravel(self.y_buf), np.ravel(self.u_buf)])
        return lift(zeta, self.pred.spec)


def control_step(ctrl: ControllerState, y: float, t: float | None = None) -> StepResult:
    """Push the newest sample, solve the horizon problem, return the input to apply.

    The input pushed alongside ``y`` is the one applied over the interval that
    ended at this sample. Until ``nd`` samples are buffered the controller
    holds its last input (0 for a fresh controller). A sampling gap longer
    than 1.5 Ts drops the buffers and restarts the warm-up.
    """
    cfg = ctrl.cfg
    status = "ok"
    if t is not None and ctrl.t_last is not None and t - ctrl.t_last > 1.5 * cfg.ts:
        ctrl.reset()
        status = "gap"
    ctrl.t_last = t
    if not np.isfinite(y):
        ctrl.reset()
        res = StepResult(ctrl.last_u, "gap")
        _log(ctrl, t, y, res)
        return res
    ctrl.y_buf.append(float(y))
    ctrl.u_buf.append(ctrl.last_u)
    if not ctrl.ready:
        res = StepResult(ctrl.last_u, "warmup" if status == "ok" else status)
        _log(ctrl, t, y, res)
        return res
    t0 = time.perf_counter()
    qp = condense(ctrl.pred, cfg, ctrl.lifted())
    warm = ctrl.warm if cfg.warm_start else None
    u, rep = solve_box_qp(qp, warm)
    elapsed = (time.perf_counter() - t0) * 1e6
    m = ctrl.pred.b.shape[1]
    ctrl.warm = np.concatenate([u[m:], np.zeros(m)])
    u0 = float(np.clip(u[0], -cfg.b, cfg.b))
    ctrl.last_u = u0
    res = StepResult(u0, status, rep.iterations, rep.residual, elapsed)
    _log(ctrl, t, y, res)
    return res


def _log(ctrl, t, y, res: StepResult):
    ctrl.log.append((t, y, res.u, res.iterations, res.kkt, res.solve_us))


LOG_HEADER = ("t", "y", "u0", "qp_iters", "kkt_residual", "solve_us")


def write_log(ctrl: ControllerState, path, *, timing=True) -> None:
    """Per-step log CSV; ``timing=False`` zeroes wall-clock columns for byte-stable output."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for t, y, u, it, kkt, us in ctrl.log:
            w.writerow([repr(t), repr(y), repr(u), it, repr(kkt), repr(us if timing else 0.0)])
