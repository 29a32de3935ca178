"""Scientific analyses built on the operator machinery: the first-order
gradient-flow identity check, output-space flow, multi-task interference and
alignment, finite-time growth spectra with Kaplan-Yorke dimensions, and the
misdirection score comparing parameter-filtered flow to the parameter-free
baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .operators import (OperatorHandle, _k_apply, _p_backward, _p_forward,
                        embed_trials, make_k, make_p, make_pkp)
from .spectral import top_svd
from .trajspace import Traj3, cosine_sim, restrict
from .training import adjoint_backward, loss_and_err


# ---------------------------------------------------------------------------
# first-order flow identity

def verify_flow(model, params, W_out, b_out, batch, eta_list) -> dict:
    """Compare the actual state change after one plain gradient step of size
    eta against the operator prediction -eta * B * (P K P*) err.

    Returns {"etas", "rel_errs", "slope"}; the slope is the log-log fit of
    error against eta over the positive eta values.
    """
    trace = model.forward(params, batch.inputs)
    loss, err = loss_and_err(trace, W_out, b_out, batch)
    _, grad, _, _ = adjoint_backward(trace, err, W_out, b_out, batch)
    B = trace.B
    pkp = make_pkp(trace)
    pred_dir = -B * pkp._apply(err.data)  # state change per unit eta
    vec = model.params_to_vector(params)
    rel_errs = []
    for eta in eta_list:
        if eta == 0.0:
            rel_errs.append(0.0)
            continue
        new_params = model.vector_to_params(params, vec - eta * grad)
        new_trace = model.forward(new_params, batch.inputs)
        actual = new_trace.z.data - trace.z.data
        pred = eta * pred_dir
        denom = np.linalg.norm(pred)
        if denom == 0.0:
            raise ZeroDivisionError("operator prediction has zero norm")
        rel_errs.append(float(np.linalg.norm(actual - pred) / denom))
    pos = [(e, r) for e, r in zip(eta_list, rel_errs) if e > 0 and r > 0]
    slope = None
    if len(pos) >= 2:
        xs = np.log([e for e, _ in pos])
        ys = np.log([r for _, r in pos])
        slope = float(np.polyfit(xs, ys, 1)[0])
    return {"etas": list(eta_list), "rel_errs": rel_errs, "slope": slope}


# ---------------------------------------------------------------------------
# output-space flow

def output_flow_operator(trace, W_out) -> OperatorHandle:
    """Theta q = W_out (P K P*) (W_out^T q), acting on [B, T, O]."""
    W_out = np.asarray(W_out, dtype=np.float64)
    B, T, _ = trace.z.shape
    O = W_out.shape[0]
    pkp = make_pkp(trace)

    def ap(q):
        return pkp._apply(q @ W_out) @ W_out.T

    return OperatorHandle(_apply=ap, _adjoint_apply=ap, shape_in=(B, T, O),
                          shape_out=(B, T, O), dt=trace.z.dt,
                          self_adjoint=True, psd=True, tag="theta")


# ---------------------------------------------------------------------------
# multi-task interference

def _check_partition(partition, B):
    idxs = [np.asarray(p, dtype=np.intp) for p in partition]
    flat = np.concatenate(idxs)
    if sorted(flat.tolist()) != list(range(B)):
        raise ValueError("partition must cover all trials exactly once")
    return idxs


def interference_step(trace, partition, err):
    """Cross-task correction blocks dz_ij = P_i K_ij P_j* err_j and their
    cosine-similarity matrix against the own-task corrections dz_ii.

    Entries with a zero-norm own-task correction are reported as None. The
    shared positive scale (learning rate and trial count) cancels in every
    cosine, so the raw operator outputs are used directly.
    """
    e = err.data if isinstance(err, Traj3) else np.asarray(err, dtype=np.float64)
    B = trace.B
    idxs = _check_partition(partition, B)
    n = len(idxs)
    blocks = {}
    for j in range(n):
        ej = np.zeros_like(e)
        ej[idxs[j]] = e[idxs[j]]
        aj = _p_backward(trace, ej)
        wj = _k_apply(trace, aj)
        pz = _p_forward(trace, wj)
        for i in range(n):
            blocks[(i, j)] = pz[idxs[i]]
    M = [[None] * n for _ in range(n)]
    for i in range(n):
        own = blocks[(i, i)].ravel()
        n_own = np.linalg.norm(own)
        for j in range(n):
            cross = blocks[(i, j)].ravel()
            n_cross = np.linalg.norm(cross)
            if n_own == 0.0 or n_cross == 0.0:
                M[i][j] = None
            elif i == j:
                M[i][j] = 1.0
            else:
                M[i][j] = float(own @ cross / (n_own * n_cross))
    return M, blocks


def rayleigh_interference(trace, partition, err):
    """Alignment of each cross-block operator with the task-j adjoint:
    entry (i, j) = <K_ij a_j, a_j> / <a_j, a_j> with a_j = P_j* err_j.
    Zero adjoints (and mismatched block sizes off the diagonal) give None."""
    e = err.data if isinstance(err, Traj3) else np.asarray(err, dtype=np.float64)
    B = trace.B
    idxs = _check_partition(partition, B)
    n = len(idxs)
    M = [[None] * n for _ in range(n)]
    for j in range(n):
        ej = np.zeros_like(e)
        ej[idxs[j]] = e[idxs[j]]
        aj_full = _p_backward(trace, ej)
        aj = aj_full[idxs[j]].ravel()
        denom = float(aj @ aj)
        if denom == 0.0:
            continue
        kfull = _k_apply(trace, aj_full)  # K embed_j(a_j), full batch
        for i in range(n):
            if len(idxs[i]) != len(idxs[j]):
                continue
            kij = kfull[idxs[i]].ravel()
            M[i][j] = float(kij @ aj / denom)
    return M


def task_alignment_matrix(trace, partition, stim_angles):
    """Pairwise cosine similarity of hidden-state trajectories across task
    blocks whose trials carry identical (matched) stimulus angles."""
    angles = np.asarray(stim_angles, dtype=np.float64)
    idxs = _check_partition(partition, trace.B)
    n = len(idxs)
    ref = angles[idxs[0]]
    for i in range(1, n):
        if angles[idxs[i]].shape != ref.shape or not np.array_equal(angles[idxs[i]], ref):
            raise ValueError("task blocks do not carry matched stimulus angles")
    zs = [restrict(trace.z, idx) for idx in idxs]
    M = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            M[i, j] = M[j, i] = cosine_sim(zs[i], zs[j])
    return M


def cumulative_alignment(matrices, filt):
    """Per-iteration mean of the filtered matrix entries, and its running
    mean over iterations. None entries are excluded; an iteration whose
    filtered entries are all None is an error."""
    filt = np.asarray(filt)
    sel = np.argwhere(filt == 1)
    per_iter = []
    for s, M in enumerate(matrices):
        vals = [M[i][j] for i, j in sel if M[i][j] is not None]
        if not vals:
            raise ValueError(f"all filtered entries undefined at iteration {s}")
        per_iter.append(float(np.mean(vals)))
    cum = np.cumsum(per_iter) / np.arange(1, len(per_iter) + 1)
    return {"per_iteration": per_iter, "cumulative": [float(c) for c in cum]}


# ---------------------------------------------------------------------------
# finite-time growth spectra

@dataclass
class LyapunovReport:
    per_trial: np.ndarray          # [B, H_state], descending per trial
    ky_per_trial: np.ndarray       # [B]
    consensus: np.ndarray | None   # [H_state]
    ky_consensus: float | None


def ky_dimension(spectrum, zero_tol: float = 1e-12) -> float:
    """Kaplan-Yorke dimension of a descending exponent spectrum: j plus the
    fractional part from the first sign change of the partial sums; 0 when
    even the leading exponent is negative, the full dimension when every
    partial sum stays non-negative. Exponents within `zero_tol` of zero are
    treated as exactly zero so that isometric (volume-preserving) systems
    report the full dimension despite rounding in the QR chain."""
    lam = np.asarray(spectrum, dtype=np.float64)
    lam = np.where(np.abs(lam) <= zero_tol, 0.0, lam)
    if lam.size == 0 or lam[0] < 0:
        return 0.0
    sums = np.cumsum(lam)
    nonneg = np.where(sums >= 0)[0]
    j = int(nonneg[-1]) + 1  # partial sums only dip once: descending spectrum
    if j >= lam.size:
        return float(lam.size)
    return float(j + sums[j - 1] / abs(lam[j]))


def lyapunov_spectrum(trace, consensus: bool = False) -> LyapunovReport:
    """QR-chain finite-time exponents per trial; optionally the consensus
    spectrum from the eigenvalues of the trial-averaged Gram of the
    accumulated transition product."""
    B, T, H = trace.z.shape
    if T < 2:
        raise ValueError("need at least one transition")
    steps = T - 1
    dt = trace.z.dt
    model = trace.model
    Q = np.tile(np.eye(H), (B, 1, 1))
    acc = np.zeros((B, H))
    U = np.tile(np.eye(H), (B, 1, 1)) if consensus else None
    for t in range(steps):
        J = model.jac_matrices(trace, t)
        M = J @ Q
        Q, R = np.linalg.qr(M)
        diag = np.abs(np.einsum("bii->bi", R))
        with np.errstate(divide="ignore"):
            acc += np.log(diag)  # -inf sentinel on rank deficiency
        if consensus:
            U = J @ U
    per_trial = np.sort(acc / (steps * dt), axis=1)[:, ::-1]
    ky_pt = np.array([ky_dimension(per_trial[b]) for b in range(B)])
    cons = ky_c = None
    if consensus:
        G = np.mean(U @ np.transpose(U, (0, 2, 1)), axis=0)
        eig = np.linalg.eigvalsh(G)[::-1]
        with np.errstate(divide="ignore"):
            cons = 0.5 * np.log(np.maximum(eig, 0.0)) / (steps * dt)
        ky_c = float(ky_dimension(cons))
    return LyapunovReport(per_trial=per_trial, ky_per_trial=ky_pt,
                          consensus=cons, ky_consensus=ky_c)


# ---------------------------------------------------------------------------
# misdirection against the parameter-free baseline

def misdirection(trace, k: int, k_op: OperatorHandle | None = None, seed: int = 0,
                 tol: float = 1e-8, max_iter: int = 400,
                 dense_limit: int = 512):
    """Alignment between the inner matrix Sigma V^T K V Sigma of the
    parameter-filtered flow and the parameter-free Sigma^2, through the top-k
    right singular functions of the propagator.

    Returns the normalized Frobenius alignment in [-1, 1]; None for an exactly
    degenerate (zero) inner matrix, 0.0 when the inner matrix is negligible
    against Sigma^2 (fully misdirected)."""
    p_op = make_p(trace)
    n = p_op.n_in
    if n <= dense_limit:
        # exact dense route for small instances
        M = np.empty((n, n))
        basis = np.zeros(n)
        for j in range(n):
            basis[:] = 0.0
            basis[j] = 1.0
            M[:, j] = p_op.apply_flat(basis)
        _, s, vt = np.linalg.svd(M)
        if k > n:
            raise ValueError(f"k={k} exceeds operator dimension {n}")
        sig = s[:k]
        vecs = [vt[i] for i in range(k)]
    else:
        summary = top_svd(p_op, k, tol=tol, max_iter=max_iter, seed=seed,
                          want_functions=True)
        if summary.k_converged < k:
            raise RuntimeError(f"propagator SVD converged only {summary.k_converged}/{k}")
        sig = summary.singular_values[:k]
        # plain-Euclidean unit vectors for the inner-matrix algebra
        vecs = [f.ravel() / np.linalg.norm(f.ravel()) for f in summary.singular_functions[:k]]
    kop = k_op if k_op is not None else make_k(trace)
    kv = [kop.apply_flat(v) for v in vecs]
    Bmat = np.empty((k, k))
    for a in range(k):
        for b in range(k):
            Bmat[a, b] = sig[a] * sig[b] * float(vecs[a] @ kv[b])
    sig2 = np.diag(sig * sig)
    nB = float(np.linalg.norm(Bmat))
    nS = float(np.linalg.norm(sig2))
    if nB == 0.0:
        return None
    if nB <= 1e-10 * max(sig[0] ** 2, 1e-300):
        return 0.0
    return float(np.sum(Bmat * sig2) / (nB * nS))
