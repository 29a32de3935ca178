"""Discretized trajectory space: [trial, time, unit] tensors with a time step.

Everything downstream (operators, spectra, training) lives on this space, so
its inner product fixes the geometry once: average over trials, integrate over
time with weight dt, plain sum over units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TRIAL = "trial"
TIME = "time"
UNIT = "unit"
AXIS_NAMES = (TRIAL, TIME, UNIT)


class ShapeMismatchError(ValueError):
    """Operands live on different discretizations."""


class ZeroNormError(ValueError):
    """Similarity with a zero-norm trajectory is undefined."""


@dataclass(frozen=True)
class Traj3:
    """A per-trial trajectory: real 3-tensor [B, T, H] plus time step dt.

    Entries must be finite and dt positive. Instances are treated as
    immutable; all functions in this module return fresh tensors.
    """

    data: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ShapeMismatchError(f"expected [B, T, H], got ndim={arr.ndim}")
        if arr.size == 0:
            raise ShapeMismatchError(f"empty trajectory, shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("trajectory contains NaN or Inf")
        if not float(self.dt) > 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def B(self) -> int:
        return self.data.shape[0]

    @property
    def T(self) -> int:
        return self.data.shape[1]

    @property
    def H(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def zeros_like(self) -> "Traj3":
        return Traj3(np.zeros_like(self.data), self.dt)


def axis_set(*names: str) -> frozenset:
    """Validated set of axes to reduce over: non-empty proper subset of
    {trial, time, unit}, so at least one axis always survives."""
    axes = frozenset(names)
    bad = axes - frozenset(AXIS_NAMES)
    if bad:
        raise ValueError(f"unknown axes {sorted(bad)}; valid: {AXIS_NAMES}")
    if not axes:
        raise ValueError("axis set must be non-empty")
    if len(axes) >= len(AXIS_NAMES):
        raise ValueError("axis set must leave at least one axis un-averaged")
    return axes


def _check_compatible(q: Traj3, r: Traj3):
    if q.shape != r.shape:
        raise ShapeMismatchError(f"shape mismatch: {q.shape} vs {r.shape}")
    if q.dt != r.dt:
        raise ShapeMismatchError(f"dt mismatch: {q.dt} vs {r.dt}")


def inner(q: Traj3, r: Traj3) -> float:
    """Inner product: (dt / B) * sum over all entries of q * r.

    The reduction order is fixed (units innermost, then time, then trials)
    so repeated calls are bit-identical.
    """
    _check_compatible(q, r)
    s = (q.data * r.data).sum(axis=2).sum(axis=1).sum(axis=0)
    return float(s * q.dt / q.B)


def norm(q: Traj3) -> float:
    return float(np.sqrt(inner(q, q)))


def cosine_sim(q: Traj3, r: Traj3) -> float:
    """Cosine similarity under the trajectory-space inner product."""
    _check_compatible(q, r)
    nq = norm(q)
    nr = norm(r)
    if nq == 0.0 or nr == 0.0:
        raise ZeroNormError("cosine similarity undefined for zero-norm input")
    return inner(q, r) / (nq * nr)


def restrict(q: Traj3, trials) -> Traj3:
    """Sub-trajectory over the listed trial indices (dt preserved)."""
    idx = np.asarray(trials, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise IndexError("trial index list must be a non-empty 1-D sequence")
    if len(set(idx.tolist())) != idx.size:
        raise IndexError("trial indices must be distinct")
    if idx.min() < 0 or idx.max() >= q.B:
        raise IndexError(f"trial index out of range for B={q.B}")
    return Traj3(q.data[idx].copy(), q.dt)


def effdim(q: Traj3, threshold: float = 0.95) -> int:
    """Number of principal components of the flattened (trial*time) x unit
    sample matrix needed to reach `threshold` of the (mean-centered)
    variance. Returns 0 for a constant trajectory.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    x = q.data.reshape(q.B * q.T, q.H)
    xc = x - x.mean(axis=0)
    svals = np.linalg.svd(xc, compute_uv=False)
    lam = svals ** 2
    total = lam.sum()
    if total <= 0.0:
        return 0
    cum = np.cumsum(lam) / total
    cum[-1] = 1.0  # guard roundoff so threshold=1.0 is always reachable
    return int(np.searchsorted(cum, threshold, side="left") + 1)
