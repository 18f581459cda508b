"""Delay-embedded lifting and least-squares linear predictors.

The lifted state stacks ``nd`` consecutive outputs and inputs (oldest first),
the magnitude of one selected embedded entry and a constant 1::

    z = [y_i .. y_{i+nd-1}, u_i .. u_{i+nd-1}, |zeta[k]|, 1]

Inputs are aligned with outputs: ``u_j`` is the input that was in effect
over the sampling interval ending at ``t_j``. The predictor advances
``z_{k+1} = A z_k + B u_{k+1}``.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import IntegrityError

SNAPSHOT_MAGIC = b"KPSNAP1"
MODEL_MAGIC = b"KPMOD1"

# published ten-step relative RMSE (percent) for the original setup; context only
REFERENCE_RMSE = 0.1468


@dataclass(frozen=True)
class DelaySpec:
    nd: int = 5
    ts: float = 0.05
    p: int = 1
    m: int = 1
    norm_index: int = 1

    def __post_init__(self):
        if self.nd < 1:
            raise ValueError("nd must be >= 1")
        if self.ts <= 0:
            raise ValueError("ts must be positive")
        if not 1 <= self.norm_index <= self.embedding_size:
            raise ValueError("norm_index must address an embedded entry (1-based)")

    @property
    def embedding_size(self) -> int:
        return self.nd * (self.p + self.m)

    @property
    def lifted_size(self) -> int:
        return self.embedding_size + 2

    def newest_output_rows(self) -> np.ndarray:
        """Row indices of the newest output sample inside ``z``."""
        return np.arange(self.p) + (self.nd - 1) * self.p

    def output_matrix(self) -> np.ndarray:
        c = np.zeros((self.p, self.lifted_size))
        c[np.arange(self.p), self.newest_output_rows()] = 1.0
        return c


def build_embedding(y_window, u_window, spec: DelaySpec) -> np.ndarray:
    """Stack ``nd`` outputs then ``nd`` inputs, oldest first.

    Windows are shaped ``(p, nd)`` / ``(m, nd)``; 1-D windows are accepted
    for scalar signals.
    """
    y = np.atleast_2d(np.asarray(y_window, dtype=float))
    u = np.atleast_2d(np.asarray(u_window, dtype=float))
    if y.shape != (spec.p, spec.nd) or u.shape != (spec.m, spec.nd):
        raise ValueError(
            f"windows must be {(spec.p, spec.nd)} and {(spec.m, spec.nd)}, got {y.shape} and {u.shape}"
        )
    return np.concatenate([y.T.ravel(), u.T.ravel()])


def lift(zeta, spec: DelaySpec) -> np.ndarray:
    """Observable vector ``[zeta, |zeta[norm_index]|, 1]``.

    Works on a single embedding or on an array of embeddings (last axis).
    """
    zeta = np.asarray(zeta, dtype=float)
    norm = np.abs(zeta[..., spec.norm_index - 1 : spec.norm_index])
    one = np.ones(zeta.shape[:-1] + (1,))
    return np.concatenate([zeta, norm, one], axis=-1)


def windows(y, u, spec: DelaySpec) -> np.ndarray:
    """Embeddings of every length-``nd`` window of one trajectory (rows).

    ``y`` is ``(T, p)`` or ``(T,)``; ``u`` likewise with ``m`` columns.
    """
    y = np.asarray(y, dtype=float).reshape(len(y), -1)
    u = np.asarray(u, dtype=float).reshape(len(u), -1)
    count = y.shape[0] - spec.nd + 1
    if count <= 0:
        return np.zeros((0, spec.embedding_size))
    idx = np.arange(count)[:, None] + np.arange(spec.nd)[None, :]
    yw = y[idx].reshape(count, -1)
    uw = u[idx].reshape(count, -1)
    return np.concatenate([yw, uw], axis=1)


@dataclass
class SnapshotSet:
    """Column-aligned lifted snapshot pairs and the inputs between them."""

    z: np.ndarray
    z_next: np.ndarray
    u: np.ndarray
    meta: dict = field(default_factory=dict)
    trajectory: np.ndarray | None = None

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        self.z_next = np.asarray(self.z_next, dtype=float)
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
        if not (self.z.shape[1] == self.z_next.shape[1] == self.u.shape[1]):
            raise ValueError("snapshot column counts differ")
        if self.z.shape[0] != self.z_next.shape[0]:
            raise ValueError("Z and Z+ row counts differ")

    @property
    def k(self) -> int:
        return self.z.shape[1]


@dataclass(frozen=True)
class LinearPredictor:
    a: np.ndarray
    b: np.ndarray
    spec: DelaySpec
    c: np.ndarray
    residual: float = 0.0
    condition: float = 1.0

    @property
    def n(self) -> int:
        return self.a.shape[0]

    def output(self, z) -> np.ndarray:
        return np.asarray(z) @ self.c.T


def fit(snapshots: SnapshotSet, spec: DelaySpec | None = None, *, rcond: float = 1e-10) -> LinearPredictor:
    """Least-squares ``[A B] = Z+ pinv([Z; U])`` via a truncated SVD solve."""
    z, zn, u = snapshots.z, snapshots.z_next, snapshots.u
    if snapshots.k == 0:
        raise ValueError("empty snapshot set")
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(zn)) and np.all(np.isfinite(u))):
        raise ValueError("snapshot data contain non-finite entries")
    n, m = z.shape[0], u.shape[0]
    if snapshots.k < n + m:
        warnings.warn(f"underdetermined fit: {snapshots.k} samples for {n + m} regressors", stacklevel=2)
    if spec is None:
        meta = snapshots.meta
        spec = DelaySpec(nd=int(meta.get("nd", (n - 2) // 2)), ts=float(meta.get("ts", 0.05)),
                         p=int(meta.get("p", 1)), m=m, norm_index=int(meta.get("norm_index", 1)))
    if spec.lifted_size != n or spec.m != m:
        raise ValueError("delay spec does not match snapshot dimensions")
    regressors = np.vstack([z, u])
    # solve the transposed system regressors^T X = zn^T in the least-squares sense
    sol, _, _, sv = scipy.linalg.lstsq(regressors.T, zn.T, cond=rcond, lapack_driver="gelsd")
    ab = sol.T
    a, b = ab[:, :n], ab[:, n:]
    resid = float(np.linalg.norm(zn - a @ z - b @ u))
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
    return LinearPredictor(a, b, spec, spec.output_matrix(), resid, cond)


def predict(pred: LinearPredictor, z0, inputs) -> tuple[np.ndarray, np.ndarray]:
    """Roll the predictor forward; returns ``(z, y)`` with ``len(inputs) + 1`` rows."""
    z0 = np.asarray(z0, dtype=float)
    if z0.shape != (pred.n,):
        raise ValueError(f"z0 must have length {pred.n}")
    u = np.asarray(inputs, dtype=float).reshape(-1, pred.b.shape[1]) if np.size(inputs) else np.zeros((0, pred.b.shape[1]))
    traj = np.empty((u.shape[0] + 1, pred.n))
    traj[0] = z0
    for k in range(u.shape[0]):
        traj[k + 1] = pred.a @ traj[k] + pred.b @ u[k]
    return traj, traj @ pred.c.T


def relative_rmse(predicted, truth) -> float:
    """``100 * ||pred - true|| / ||true||`` over all samples (percent)."""
    p = np.asarray(predicted, dtype=float)
    t = np.asarray(truth, dtype=float)
    if p.shape != t.shape or p.size == 0:
        raise ValueError("predicted and true trajectories must have equal non-zero length")
    den = np.sqrt(np.sum(t ** 2))
    if den == 0:
        raise ValueError("true trajectory is identically zero; relative error undefined")
    return float(100.0 * np.sqrt(np.sum((p - t) ** 2)) / den)


# -- persistence -------------------------------------------------------------

def _write_matrix(fh, mat):
    fh.write(np.ascontiguousarray(mat, dtype="<f8").tobytes(order="C"))


def _read_exact(fh, count, what):
    data = fh.read(count)
    if len(data) != count:
        raise IntegrityError(f"truncated file while reading {what}")
    return data


def _read_matrix(fh, rows, cols, what):
    raw = _read_exact(fh, 8 * rows * cols, what)
    return np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(float)


def save_snapshots(snapshots: SnapshotSet, path) -> None:
    """``KPSNAP1`` + (N, m, K) as uint64 LE + Z, Z+, U row-major float64 LE."""
    n, m, k = snapshots.z.shape[0], snapshots.u.shape[0], snapshots.k
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<3Q", n, m, k))
        _write_matrix(fh, snapshots.z)
        _write_matrix(fh, snapshots.z_next)
        _write_matrix(fh, snapshots.u)


def load_snapshots(path) -> SnapshotSet:
    with open(path, "rb") as fh:
        if fh.read(len(SNAPSHOT_MAGIC)) != SNAPSHOT_MAGIC:
            raise IntegrityError(f"{path}: not a snapshot file")
        n, m, k = struct.unpack("<3Q", _read_exact(fh, 24, "header"))
        z = _read_matrix(fh, n, k, "Z")
        zn = _read_matrix(fh, n, k, "Z+")
        u = _read_matrix(fh, m, k, "U")
        if fh.read(1):
            raise IntegrityError(f"{path}: trailing bytes")
    return SnapshotSet(z, zn, u)


def save_predictor(pred: LinearPredictor, path) -> None:
    """``KPMOD1`` + (N, m, p, nd, norm_index) uint64 + (ts, residual, condition)
    float64 + A, B, C row-major float64, all little-endian."""
    s = pred.spec
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<5Q", pred.n, s.m, s.p, s.nd, s.norm_index))
        fh.write(struct.pack("<3d", s.ts, pred.residual, pred.condition))
        _write_matrix(fh, pred.a)
        _write_matrix(fh, pred.b)
        _write_matrix(fh, pred.c)


def load_predictor(path) -> LinearPredictor:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(len(MODEL_MAGIC)) != MODEL_MAGIC:
            raise IntegrityError(f"{path}: not a predictor file")
        n, m, p, nd, norm_index = struct.unpack("<5Q", _read_exact(fh, 40, "header"))
        ts, resid, cond = struct.unpack("<3d", _read_exact(fh, 24, "header"))
        spec = DelaySpec(nd=nd, ts=ts, p=p, m=m, norm_index=norm_index)
        if spec.lifted_size != n:
            raise IntegrityError(f"{path}: header dimensions are inconsistent")
        a = _read_matrix(fh, n, n, "A")
        b = _read_matrix(fh, n, m, "B")
        c = _read_matrix(fh, p, n, "C")
        if fh.read(1):
            raise IntegrityError(f"{path}: trailing bytes")
    return LinearPredictor(a, b, spec, c, resid, cond)
