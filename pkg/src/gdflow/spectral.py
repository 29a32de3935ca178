"""Spectral tools for operator handles: matrix-free top-k SVD (Lanczos with
full reorthogonalization), exact dense SVD for materialized reductions,
cumulative-energy effective ranks, and Rayleigh quotients.

Singular values are reported descending. Energy conventions: "sv" treats the
singular values themselves as energies (the natural choice for the PSD
parameter operator, whose eigenvalues are its singular values), "sv_squared"
uses their squares (the explained-variance reading for general operators).
Both ranks are always computed; summaries record which one is primary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .operators import OperatorHandle
from .trajspace import Traj3, ZeroNormError

_TINY = 1e-300


@dataclass
class SpectralSummary:
    singular_values: np.ndarray
    energy_convention: str
    effective_rank_95: int
    effective_ranks: dict
    k_requested: int
    k_converged: int
    residual_tol: float
    residuals: np.ndarray
    threshold: float = 0.95
    full_spectrum: bool = False
    singular_functions: list | None = None

    def to_dict(self) -> dict:
        return {
            "singular_values": [float(v) for v in self.singular_values],
            "energy_convention": self.energy_convention,
            "effective_rank_95": int(self.effective_rank_95),
            "effective_ranks": {k: int(v) for k, v in self.effective_ranks.items()},
            "k_requested": int(self.k_requested),
            "k_converged": int(self.k_converged),
            "residual_tol": float(self.residual_tol),
            "residuals": [float(r) for r in self.residuals],
            "threshold": float(self.threshold),
            "full_spectrum": bool(self.full_spectrum),
        }


def effective_rank(values, convention: str = "sv_squared", threshold: float = 0.95) -> int:
    """Smallest k whose leading energies reach `threshold` of the total;
    0 for an all-zero spectrum."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return 0
    if np.any(v < -1e-12 * max(1.0, float(np.max(np.abs(v))))):
        raise ValueError("singular values must be non-negative")
    v = np.maximum(v, 0.0)
    if np.any(np.diff(v) > 1e-10 * max(1.0, float(v[0]))):
        raise ValueError("singular values must be sorted descending")
    if convention == "sv":
        e = v
    elif convention == "sv_squared":
        e = v * v
    else:
        raise ValueError(f"unknown energy convention {convention!r}")
    total = e.sum()
    if total <= 0.0:
        return 0
    cum = np.cumsum(e) / total
    cum[-1] = 1.0
    return int(np.searchsorted(cum, threshold, side="left") + 1)


def rayleigh(op: OperatorHandle, q) -> float:
    """<A q, q> / <q, q> (scale factors of the inner product cancel)."""
    arr = q.data if isinstance(q, Traj3) else np.asarray(q, dtype=np.float64)
    v = arr.ravel()
    denom = float(v @ v)
    if denom == 0.0:
        raise ZeroNormError("Rayleigh quotient of a zero trajectory")
    return float(op.apply_flat(v) @ v) / denom


def _default_convention(op: OperatorHandle) -> str:
    return "sv" if op.psd else "sv_squared"


def _ranks(values, threshold):
    return {"sv": effective_rank(values, "sv", threshold),
            "sv_squared": effective_rank(values, "sv_squared", threshold)}


def _summary(values, functions, residuals, k, tol, threshold, convention, full):
    conv_ranks = _ranks(values, threshold)
    if full:
        n_conv = min(k, values.size)
    elif residuals.size == 0:
        n_conv = 0
    elif np.all(residuals <= tol):
        n_conv = residuals.size
    else:
        n_conv = int(np.argmax(residuals > tol))  # length of the converged prefix
    return SpectralSummary(
        singular_values=values, energy_convention=convention,
        effective_rank_95=conv_ranks[convention], effective_ranks=conv_ranks,
        k_requested=k, k_converged=n_conv,
        residual_tol=tol, residuals=residuals, threshold=threshold,
        full_spectrum=full, singular_functions=functions)


def top_svd(op: OperatorHandle, k: int, tol: float = 1e-8, max_iter: int = 300,
            seed: int = 0, threshold: float = 0.95, convention: str | None = None,
            want_functions: bool = True) -> SpectralSummary:
    """Leading singular triplets of an operator handle.

    Materialized operators get an exact dense SVD (full spectrum). Otherwise:
    symmetric Lanczos on self-adjoint handles, Golub-Kahan bidiagonalization
    in general, both with full reorthogonalization and seeded start vectors,
    converged when the explicit residual of each leading triplet falls below
    `tol` relative to the top singular value.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    convention = convention or _default_convention(op)
    if op.matrix is not None:
        u, s, vt = np.linalg.svd(op.matrix)
        funcs = None
        if want_functions:
            kk = min(k, s.size)
            funcs = [vt[i].reshape(op.shape_in) for i in range(kk)]
        res = np.zeros(min(k, s.size))
        return _summary(s, funcs, res, k, tol, threshold, convention, full=True)
    if op.self_adjoint:
        vals, vecs, res = _lanczos_symmetric(op, k, tol, max_iter, seed)
    else:
        vals, vecs, res = _golub_kahan(op, k, tol, max_iter, seed)
    funcs = None
    if want_functions:
        funcs = [_renormalize(op, v) for v in vecs]
    return _summary(vals, funcs, res, k, tol, threshold, convention, full=False)


def _renormalize(op: OperatorHandle, flat_vec: np.ndarray):
    """Return the singular function shaped like the domain, unit-normalized in
    the trajectory inner product when the domain is [B, T, H]."""
    arr = flat_vec.reshape(op.shape_in)
    if len(op.shape_in) == 3:
        scale = np.sqrt(op.shape_in[0] / op.dt)
        return arr * scale
    return arr


def _reorthogonalize(w: np.ndarray, basis: list) -> np.ndarray:
    for _ in range(2):  # classical Gram-Schmidt, two passes
        for v in basis:
            w = w - (v @ w) * v
    return w


def _lanczos_symmetric(op: OperatorHandle, k: int, tol: float, max_iter: int, seed: int):
    n = op.n_in
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    V = [v]
    alphas, betas = [], []
    m_cap = min(n, max_iter)
    exhausted = False
    for j in range(m_cap):
        w = op.apply_flat(V[j])
        a = float(V[j] @ w)
        alphas.append(a)
        w = w - a * V[j]
        if j > 0:
            w = w - betas[-1] * V[j - 1]
        w = _reorthogonalize(w, V)
        b = float(np.linalg.norm(w))
        if b < 1e-14 * max(1.0, abs(alphas[0])):
            exhausted = True
            break
        if j + 1 < m_cap:
            betas.append(b)
            V.append(w / b)
        else:
            betas.append(b)
    m = len(alphas)
    T = np.diag(alphas)
    for i in range(min(len(betas), m - 1)):
        T[i, i + 1] = T[i + 1, i] = betas[i]
    evals, evecs = np.linalg.eigh(T)
    order = np.argsort(-np.abs(evals))
    evals = evals[order]
    evecs = evecs[:, order]
    kk = min(k, m)
    Vm = np.stack(V[:m], axis=1)  # [n, m]
    vecs = [Vm @ evecs[:, i] for i in range(kk)]
    svals = np.abs(evals)
    top = max(svals[0], _TINY)
    if exhausted:
        res = np.zeros(kk)
    else:
        beta_m = betas[m - 1] if len(betas) >= m else 0.0
        res = np.array([abs(beta_m * evecs[m - 1, i]) / top for i in range(kk)])
    return svals[:kk], vecs, res


def _golub_kahan(op: OperatorHandle, k: int, tol: float, max_iter: int, seed: int):
    n = op.n_in
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    V = [v]
    U = []
    alphas, betas = [], []
    m_cap = min(n, max_iter)
    for j in range(m_cap):
        u = op.apply_flat(V[j])
        if j > 0:
            u = u - betas[-1] * U[j - 1]
        u = _reorthogonalize(u, U)
        a = float(np.linalg.norm(u))
        if a < 1e-14 * max(1.0, alphas[0] if alphas else 1.0):
            break  # range space exhausted
        alphas.append(a)
        U.append(u / a)
        w = op.adjoint_apply_flat(U[j])
        w = w - a * V[j]
        w = _reorthogonalize(w, V)
        b = float(np.linalg.norm(w))
        if b < 1e-14 * max(1.0, alphas[0]) or j + 1 >= m_cap:
            break
        betas.append(b)
        V.append(w / b)
    m = len(alphas)
    Bm = np.zeros((m, m))
    for i in range(m):
        Bm[i, i] = alphas[i]
        if i + 1 < m and i < len(betas):
            Bm[i, i + 1] = betas[i]
    # recursions above give A V_m = U_m B_m with B_m upper bidiagonal
    y, s, xt = np.linalg.svd(Bm)
    kk = min(k, m)
    Um = np.stack(U, axis=1) if U else np.zeros((op.n_out, 0))
    Vm = np.stack(V[:m], axis=1)
    left = [Um @ y[:, i] for i in range(kk)]
    right = [Vm @ xt[i] for i in range(kk)]
    top = max(s[0], _TINY)
    res = np.empty(kk)
    for i in range(kk):
        r1 = np.linalg.norm(op.apply_flat(right[i]) - s[i] * left[i])
        r2 = np.linalg.norm(op.adjoint_apply_flat(left[i]) - s[i] * right[i])
        res[i] = max(r1, r2) / top
    return s[:kk], right, res
