"""Shared test fixtures: independent oracles (dense materialization, finite
differences, naive reductions) and a stub linear model for operator tests."""

import numpy as np

from gdflow.models.base import ForwardTrace
from gdflow.trajspace import Traj3


def materialize(op) -> np.ndarray:
    """Dense matrix of an operator handle by applying it to basis vectors."""
    n = op.n_in
    m = op.n_out
    M = np.zeros((m, n))
    e = np.zeros(n)
    for j in range(n):
        e[:] = 0.0
        e[j] = 1.0
        M[:, j] = op.apply_flat(e)
    return M


def naive_inner(q: Traj3, r: Traj3) -> float:
    """Triple-loop reduction oracle for the trajectory inner product."""
    B, T, H = q.shape
    acc = 0.0
    for b in range(B):
        for t in range(T):
            for h in range(H):
                acc += q.data[b, t, h] * r.data[b, t, h]
    return acc * q.dt / B


class LinearStubModel:
    """Model stub with prescribed per-(trial, time) Jacobians and no
    parameters; enough surface for propagator and growth-spectrum tests."""

    name = "linear_stub"

    def jac_matrices(self, trace, t):
        return trace.caches["J"][:, t]

    def jac_apply_all(self, trace, t, V, trial_slice=None):
        J = trace.caches["J"][:, t]
        if trial_slice is not None:
            J = J[trial_slice]
        return np.einsum("bij,bj->bi", J, V)

    def jac_tapply_all(self, trace, t, V, trial_slice=None):
        J = trace.caches["J"][:, t]
        if trial_slice is not None:
            J = J[trial_slice]
        return np.einsum("bji,bj->bi", J, V)


def stub_trace(J: np.ndarray, dt: float = 1.0) -> ForwardTrace:
    """Trace over prescribed Jacobians J of shape [B, T-1, H, H]."""
    B, Tm1, H, _ = J.shape
    T = Tm1 + 1
    return ForwardTrace(model=LinearStubModel(), params=None,
                        inputs=np.zeros((B, T, 1)),
                        z=Traj3(np.zeros((B, T, H)), dt), caches={"J": J})


def central_diff(f, x0: np.ndarray, direction: np.ndarray, eps: float = 1e-6) -> float:
    d = direction / np.linalg.norm(direction)
    return (f(x0 + eps * d) - f(x0 - eps * d)) / (2.0 * eps)


def random_batch(B, T, H_out, I, seed, dt=1.0):
    """A raw TrialBatch-shaped bundle for loss tests (targets random)."""
    from gdflow.tasks import TrialBatch
    rng = np.random.default_rng(seed)
    return TrialBatch(
        inputs=rng.standard_normal((B, T, I)),
        targets=rng.standard_normal((B, T, H_out)),
        loss_mask=np.ones((B, T)),
        period_labels=np.zeros((B, T), dtype=np.int8),
        task_labels=np.zeros(B, dtype=np.int64),
        stim_angles=np.zeros(B), dt=dt)
