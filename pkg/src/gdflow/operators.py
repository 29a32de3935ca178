"""Matrix-free linear operators on trajectory space.

The two central maps are the flow propagator (forward variational recursion
over each trial) and the parameter operator (parameter vjp followed by jvp),
plus their compositions, trial-block restrictions, the fundamental /
running-integration factorization, and consensus reductions over chosen axes.

Slot convention: inputs to the propagator are indexed by source time; the
entry at t = T-1 has no transition and is ignored, and outputs start at zero
(propagator) or end at zero (its adjoint). See models.base for the matching
parameter-jacobian convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .trajspace import AXIS_NAMES, Traj3, axis_set


class SingularJacobianError(RuntimeError):
    """A transition Jacobian is singular; the fundamental factorization is
    unavailable (fall back to the propagator itself)."""


@dataclass
class OperatorHandle:
    """A linear map defined by apply / adjoint-apply callbacks plus metadata.

    `shape_in` / `shape_out` are concrete array shapes ([B, T, H] for full
    trajectory-space operators, the kept-axis shape for reduced ones). When a
    reduced operator is small enough it is materialized in `matrix` and the
    callbacks go through exact dense algebra.
    """

    _apply: callable
    _adjoint_apply: callable
    shape_in: tuple
    shape_out: tuple
    dt: float = 1.0
    self_adjoint: bool = False
    psd: bool = False
    block_diagonal_over_trials: bool = False
    exact_linear: bool = True
    tag: str = ""
    matrix: np.ndarray | None = None

    def apply(self, q):
        arr, was_traj = _unwrap(q, self.shape_in)
        out = self._apply(arr)
        return Traj3(out, self.dt) if was_traj else out

    def adjoint_apply(self, q):
        arr, was_traj = _unwrap(q, self.shape_out)
        out = self._adjoint_apply(arr)
        return Traj3(out, self.dt) if was_traj else out

    @property
    def n_in(self) -> int:
        return int(np.prod(self.shape_in))

    @property
    def n_out(self) -> int:
        return int(np.prod(self.shape_out))

    def apply_flat(self, v: np.ndarray) -> np.ndarray:
        return self._apply(v.reshape(self.shape_in)).ravel()

    def adjoint_apply_flat(self, v: np.ndarray) -> np.ndarray:
        return self._adjoint_apply(v.reshape(self.shape_out)).ravel()


def _unwrap(q, expected_shape):
    if isinstance(q, Traj3):
        arr = q.data
        was_traj = True
    else:
        arr = np.asarray(q, dtype=np.float64)
        was_traj = False
    if arr.shape != tuple(expected_shape):
        raise ValueError(f"operand shape {arr.shape} != operator domain {expected_shape}")
    return arr, was_traj


# ---------------------------------------------------------------------------
# propagator and adjoint

def _p_forward(trace, q):
    """p[:, 0] = 0;  p[:, t+1] = J[:, t] p[:, t] + q[:, t]."""
    model = trace.model
    B, T, H = trace.z.shape
    p = np.zeros((B, T, H))
    for t in range(T - 1):
        p[:, t + 1] = model.jac_apply_all(trace, t, p[:, t]) + q[:, t]
    return p


def _p_backward(trace, q):
    """a[:, T-1] = 0;  a[:, s] = J[:, s+1]^T a[:, s+1] + q[:, s+1].

    Exact transpose of `_p_forward` under the trajectory inner product; the
    result at slot s is the loss adjoint of the state at time s+1 when q is
    the per-step error signal.
    """
    model = trace.model
    B, T, H = trace.z.shape
    a = np.zeros((B, T, H))
    if T < 2:
        return a
    a[:, T - 2] = q[:, T - 1]
    for s in range(T - 3, -1, -1):
        a[:, s] = model.jac_tapply_all(trace, s + 1, a[:, s + 1]) + q[:, s + 1]
    return a


def make_p(trace, mode: str = "linearized", direct_scale: float | None = None) -> OperatorHandle:
    """Flow propagator on [B, T, H]; block-diagonal over trials.

    `linearized` runs the variational recursion and is the ground truth.
    `direct` reruns the model forward with a small additive per-step
    perturbation and differences the states; it agrees with the linearized
    mode to first order and is flagged `exact_linear=False`.
    """
    shape = trace.z.shape
    if mode == "linearized":
        apply_ = lambda q: _p_forward(trace, q)
    elif mode == "direct":
        znorm = float(np.linalg.norm(trace.z.data))
        scale = direct_scale if direct_scale is not None else 1e-5 * (znorm if znorm > 0 else 1.0)

        def apply_(q, _scale=scale):
            qn = float(np.linalg.norm(q))
            if qn == 0.0:
                return np.zeros(shape)
            s = _scale / qn
            pert_trace = trace.model.forward(trace.params, trace.inputs,
                                             z0=trace.z.data[:, 0],
                                             step_perturbation=s * q)
            return (pert_trace.z.data - trace.z.data) / s
    else:
        raise ValueError(f"unknown propagator mode {mode!r}")
    return OperatorHandle(
        _apply=apply_, _adjoint_apply=lambda q: _p_backward(trace, q),
        shape_in=shape, shape_out=shape, dt=trace.z.dt,
        block_diagonal_over_trials=True, exact_linear=(mode == "linearized"),
        tag=f"p[{mode}]")


def make_p_adjoint(trace) -> OperatorHandle:
    shape = trace.z.shape
    return OperatorHandle(
        _apply=lambda q: _p_backward(trace, q),
        _adjoint_apply=lambda q: _p_forward(trace, q),
        shape_in=shape, shape_out=shape, dt=trace.z.dt,
        block_diagonal_over_trials=True, tag="p*")


# ---------------------------------------------------------------------------
# parameter operator and compositions

def _k_apply(trace, q):
    theta = trace.model.param_vjp(trace, q)
    return trace.model.param_jvp(trace, theta).data


def make_k(trace) -> OperatorHandle:
    """Parameter operator: vjp into parameter space, then jvp back out.

    Self-adjoint and positive semi-definite; the only operator here that
    mixes trials.
    """
    shape = trace.z.shape
    apply_ = lambda q: _k_apply(trace, q)
    return OperatorHandle(_apply=apply_, _adjoint_apply=apply_,
                          shape_in=shape, shape_out=shape, dt=trace.z.dt,
                          self_adjoint=True, psd=True, tag="k")


def make_pkp(trace) -> OperatorHandle:
    shape = trace.z.shape
    apply_ = lambda q: _p_forward(trace, _k_apply(trace, _p_backward(trace, q)))
    return OperatorHandle(_apply=apply_, _adjoint_apply=apply_,
                          shape_in=shape, shape_out=shape, dt=trace.z.dt,
                          self_adjoint=True, psd=True, tag="pkp*")


def make_ppstar(trace) -> OperatorHandle:
    shape = trace.z.shape
    apply_ = lambda q: _p_forward(trace, _p_backward(trace, q))
    return OperatorHandle(_apply=apply_, _adjoint_apply=apply_,
                          shape_in=shape, shape_out=shape, dt=trace.z.dt,
                          self_adjoint=True, psd=True, tag="pp*")


# ---------------------------------------------------------------------------
# trial-block restrictions

def embed_trials(q_block: np.ndarray, idx: np.ndarray, B: int) -> np.ndarray:
    out = np.zeros((B,) + q_block.shape[1:])
    out[idx] = q_block
    return out


@dataclass
class BlockOperators:
    """Per-task restrictions: P_i acts on task-i trials only (valid because
    the propagator never mixes trials); K_ij maps task-j signals to task-i
    corrections through the full-batch parameter operator."""

    op_p: OperatorHandle
    op_k: OperatorHandle
    partition: list

    @property
    def n_blocks(self) -> int:
        return len(self.partition)

    def p_block(self, i: int) -> OperatorHandle:
        idx = self.partition[i]
        B = self.op_p.shape_in[0]
        sub = (len(idx),) + tuple(self.op_p.shape_in[1:])
        ap = lambda q: self.op_p._apply(embed_trials(q, idx, B))[idx]
        aj = lambda q: self.op_p._adjoint_apply(embed_trials(q, idx, B))[idx]
        return OperatorHandle(_apply=ap, _adjoint_apply=aj, shape_in=sub, shape_out=sub,
                              dt=self.op_p.dt, block_diagonal_over_trials=True,
                              tag=f"{self.op_p.tag}[{i}]")

    def k_block(self, i: int, j: int) -> OperatorHandle:
        idx_i, idx_j = self.partition[i], self.partition[j]
        B = self.op_k.shape_in[0]
        rest = tuple(self.op_k.shape_in[1:])
        ap = lambda q: self.op_k._apply(embed_trials(q, idx_j, B))[idx_i]
        aj = lambda q: self.op_k._apply(embed_trials(q, idx_i, B))[idx_j]
        return OperatorHandle(_apply=ap, _adjoint_apply=aj,
                              shape_in=(len(idx_j),) + rest,
                              shape_out=(len(idx_i),) + rest,
                              dt=self.op_k.dt, self_adjoint=(i == j), psd=(i == j),
                              tag=f"{self.op_k.tag}[{i},{j}]")


def restrict_blocks(op_k: OperatorHandle, op_p: OperatorHandle, partition) -> BlockOperators:
    """Validates the partition (disjoint cover of all trials) and returns the
    block-operator factory."""
    B = op_k.shape_in[0]
    idxs = [np.asarray(p, dtype=np.intp) for p in partition]
    flat = np.concatenate(idxs) if idxs else np.array([], dtype=np.intp)
    if len(set(flat.tolist())) != flat.size:
        raise ValueError("partition blocks overlap")
    if sorted(flat.tolist()) != list(range(B)):
        raise ValueError("partition must cover all trials exactly once")
    return BlockOperators(op_p=op_p, op_k=op_k, partition=idxs)


# ---------------------------------------------------------------------------
# running time-integration operator

def make_volterra(T: int, dt: float = 1.0, inclusive: bool = True,
                  B: int = 1, H: int = 1) -> OperatorHandle:
    """Per-trial, per-unit running time sum scaled by dt.

    Inclusive form: (Vq)[t] = dt * sum_{s<=t} q[s]. The exclusive form
    (sum over s < t) matches the propagator with identity Jacobians.
    """
    if inclusive:
        def ap(q):
            return dt * np.cumsum(q, axis=1)

        def aj(q):
            return dt * np.cumsum(q[:, ::-1], axis=1)[:, ::-1]
    else:
        def ap(q):
            cs = np.cumsum(q, axis=1)
            out = np.zeros_like(cs)
            out[:, 1:] = dt * cs[:, :-1]
            return out

        def aj(q):
            rs = np.cumsum(q[:, ::-1], axis=1)[:, ::-1]
            out = np.zeros_like(rs)
            out[:, :-1] = dt * rs[:, 1:]
            return out

    shape = (B, T, H)
    return OperatorHandle(_apply=ap, _adjoint_apply=aj, shape_in=shape, shape_out=shape,
                          dt=dt, block_diagonal_over_trials=True,
                          tag=f"volterra[{'incl' if inclusive else 'excl'}]")


# ---------------------------------------------------------------------------
# fundamental operator

class Fundamental:
    """Per-(trial, time) state-transition factors U(t|b) = J[b,t-1] ... J[b,0].

    Acts pointwise in time: (U q)[b, t] = U(t|b) q[b, t]. Together with the
    running-sum operator this factorizes the propagator as

        P = U o cumsum o U^{-1} o shift

    where shift moves source-slot inputs onto their target step. Singular
    values of U(t|b) generate finite-time growth exponents.
    """

    def __init__(self, trace, qr_stabilized: bool = False,
                 singular_rtol: float = 1e-12, cond_limit: float = 1e8):
        B, T, H = trace.z.shape
        self.B, self.T, self.H = B, T, H
        self.dt = trace.z.dt
        self.qr_stabilized = qr_stabilized
        jmats = np.stack([trace.model.jac_matrices(trace, t) for t in range(T - 1)], axis=1)
        # singularity guard on each step Jacobian
        for t in range(T - 1):
            sv = np.linalg.svd(jmats[:, t], compute_uv=False)
            bad = sv[:, -1] <= singular_rtol * sv[:, 0]
            if np.any(bad):
                b = int(np.where(bad)[0][0])
                raise SingularJacobianError(
                    f"transition Jacobian singular at (b={b}, t={t}); "
                    f"factorization unavailable")
        self.U = np.empty((B, T, H, H))
        self.U[:, 0] = np.eye(H)
        if qr_stabilized:
            self.Q = np.empty((B, T, H, H))
            self.R = np.empty((B, T, H, H))
            self.Q[:, 0] = np.eye(H)
            self.R[:, 0] = np.eye(H)
            rprod = np.tile(np.eye(H), (B, 1, 1))
            q_cur = np.tile(np.eye(H), (B, 1, 1))
            for t in range(T - 1):
                m = jmats[:, t] @ q_cur
                q_cur, r = np.linalg.qr(m)
                self.Q[:, t + 1] = q_cur
                self.R[:, t + 1] = r
                rprod = r @ rprod
                self.U[:, t + 1] = q_cur @ rprod
        else:
            for t in range(T - 1):
                self.U[:, t + 1] = jmats[:, t] @ self.U[:, t]
        sv = np.linalg.svd(self.U.reshape(B * T, H, H), compute_uv=False)
        self.cond_max = float(np.max(sv[:, 0] / np.maximum(sv[:, -1], 1e-300)))
        self._cond_limit = cond_limit
        self._svals = sv.reshape(B, T, H)

    def singular_values(self, b: int, t: int) -> np.ndarray:
        return self._svals[b, t]

    def apply(self, q: np.ndarray) -> np.ndarray:
        return np.einsum("bthk,btk->bth", self.U, q)

    def inverse_apply(self, q: np.ndarray) -> np.ndarray:
        if self.cond_max > self._cond_limit:
            raise SingularJacobianError(
                f"fundamental factors too ill-conditioned (cond {self.cond_max:.2e})")
        return np.linalg.solve(self.U, q[..., None])[..., 0]

    def factorization_apply(self, q: np.ndarray) -> np.ndarray:
        """Evaluate the propagator through the factorization (diagnostic path;
        unit time step in the running sum, matching the recursion)."""
        shifted = np.zeros_like(q)
        shifted[:, 1:] = q[:, :-1]
        w = self.inverse_apply(shifted)
        v = np.cumsum(w, axis=1)
        return self.apply(v)

    def reconstruct_plain_product(self) -> np.ndarray:
        """QR-chain reconstruction of U (only meaningful with qr_stabilized)."""
        if not self.qr_stabilized:
            raise ValueError("constructed without QR stabilization")
        return self.U


def make_fundamental(trace, qr_stabilized: bool = False) -> Fundamental:
    return Fundamental(trace, qr_stabilized=qr_stabilized)


# ---------------------------------------------------------------------------
# consensus reduction

def average(op: OperatorHandle, axes, materialize_limit: int = 4096) -> OperatorHandle:
    """Reduced operator: broadcast the input over the averaged axes, apply,
    then average the output over those axes. Self-adjointness survives the
    reduction. Materialized densely (via basis vectors) when the reduced
    dimension is at most `materialize_limit`.
    """
    axes = axis_set(*axes)
    if len(op.shape_in) != 3 or op.shape_in != op.shape_out:
        raise ValueError("consensus reduction requires a square [B, T, H] operator")
    avg_pos = tuple(i for i, name in enumerate(AXIS_NAMES) if name in axes)
    kept_pos = tuple(i for i, name in enumerate(AXIS_NAMES) if name not in axes)
    full = tuple(op.shape_in)
    reduced_shape = tuple(full[i] for i in kept_pos)

    def _broadcast(v):
        shape = [1, 1, 1]
        for pos in kept_pos:
            shape[pos] = full[pos]
        return np.broadcast_to(v.reshape(shape), full).copy()

    def ap(v):
        return op._apply(_broadcast(v)).mean(axis=avg_pos)

    def aj(v):
        return op._adjoint_apply(_broadcast(v)).mean(axis=avg_pos)

    d = int(np.prod(reduced_shape))
    matrix = None
    if d <= materialize_limit:
        matrix = np.empty((d, d))
        basis = np.zeros(d)
        for j in range(d):
            basis[:] = 0.0
            basis[j] = 1.0
            matrix[:, j] = ap(basis.reshape(reduced_shape)).ravel()
        mat = matrix

        def ap(v, _m=mat):
            return (_m @ v.ravel()).reshape(reduced_shape)

        def aj(v, _m=mat):
            return (_m.T @ v.ravel()).reshape(reduced_shape)

    if op.self_adjoint:
        aj = ap
    return OperatorHandle(_apply=ap, _adjoint_apply=aj,
                          shape_in=reduced_shape, shape_out=reduced_shape,
                          dt=op.dt, self_adjoint=op.self_adjoint, psd=op.psd,
                          tag=f"avg[{','.join(sorted(axes))}]({op.tag})", matrix=matrix)


# ---------------------------------------------------------------------------
# probe utilities (shared by the verification suite and tests)

def adjointness_residual(op: OperatorHandle, n_probes: int = 16, seed: int = 0) -> float:
    """max over probes of |<Aq, r> - <q, A*r>| / (|Aq| |r| + |q| |A*r|)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_probes):
        q = rng.standard_normal(op.shape_in)
        r = rng.standard_normal(op.shape_out)
        aq = op._apply(q).ravel()
        ar = op._adjoint_apply(r).ravel()
        lhs = float(aq @ r.ravel())
        rhs = float(q.ravel() @ ar)
        denom = np.linalg.norm(aq) * np.linalg.norm(r) + np.linalg.norm(q) * np.linalg.norm(ar)
        if denom == 0.0:
            continue
        worst = max(worst, abs(lhs - rhs) / denom)
    return worst


def linearity_residual(op: OperatorHandle, n_probes: int = 8, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_probes):
        q = rng.standard_normal(op.shape_in)
        r = rng.standard_normal(op.shape_in)
        a, b = rng.standard_normal(2)
        lhs = op._apply(a * q + b * r)
        rhs = a * op._apply(q) + b * op._apply(r)
        denom = np.linalg.norm(rhs)
        if denom == 0.0:
            continue
        worst = max(worst, float(np.linalg.norm(lhs - rhs) / denom))
    return worst


def rayleigh_quotients(op: OperatorHandle, n_probes: int = 100, seed: int = 0) -> np.ndarray:
    """<Aq, q> / <q, q> over random probes (sign diagnostics for PSD claims)."""
    rng = np.random.default_rng(seed)
    out = np.empty(n_probes)
    for i in range(n_probes):
        q = rng.standard_normal(op.shape_in).ravel()
        out[i] = float(op.apply_flat(q) @ q) / float(q @ q)
    return out
