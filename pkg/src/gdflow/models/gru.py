"""Gated recurrent unit with hand-derived Jacobian actions.

Gate equations (the original formulation, update gate keeps the old state):

    u[t] = logistic(W_z z[t] + U_z x[t] + b_z)        update gate
    r[t] = logistic(W_r z[t] + U_r x[t] + b_r)        reset gate
    c[t] = tanh(W_c (r[t] * z[t]) + U_c x[t] + b_c)   candidate
    z[t+1] = u[t] * z[t] + (1 - u[t]) * c[t]

All Jacobian and parameter-Jacobian actions below follow from these four
lines by the chain rule and are checked against finite differences in the
test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..trajspace import Traj3
from .base import ForwardTrace, ModelBase, as_array, check_finite_step


def _logistic(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class GruParams:
    W_z: np.ndarray  # [H, H]
    W_r: np.ndarray
    W_c: np.ndarray
    U_z: np.ndarray  # [H, I]
    U_r: np.ndarray
    U_c: np.ndarray
    b_z: np.ndarray  # [H]
    b_r: np.ndarray
    b_c: np.ndarray

    def __post_init__(self):
        H = self.W_z.shape[0]
        for m in (self.W_z, self.W_r, self.W_c):
            if m.shape != (H, H):
                raise ValueError("recurrent gate matrices must be [H, H]")
        I = self.U_z.shape[1]
        for m in (self.U_z, self.U_r, self.U_c):
            if m.shape != (H, I):
                raise ValueError("input gate matrices must share [H, I]")
        for v in (self.b_z, self.b_r, self.b_c):
            if v.shape != (H,):
                raise ValueError("gate biases must be [H]")

    @property
    def H(self) -> int:
        return self.W_z.shape[0]

    @property
    def I(self) -> int:
        return self.U_z.shape[1]


def gru_init(H: int, I: int, g: float, seed: int) -> GruParams:
    """Recurrent [H, H] matrices ~ Normal(0, g^2/H); input ~ Normal(0, 1/I)."""
    rng = np.random.default_rng(seed)
    rec = lambda: rng.normal(0.0, 1.0, size=(H, H)) * (g / np.sqrt(H))
    inp = lambda: rng.normal(0.0, 1.0 / np.sqrt(I), size=(H, I))
    return GruParams(W_z=rec(), W_r=rec(), W_c=rec(),
                     U_z=inp(), U_r=inp(), U_c=inp(),
                     b_z=np.zeros(H), b_r=np.zeros(H), b_c=np.zeros(H))


class GruModel(ModelBase):
    name = "gru"

    def forward(self, params: GruParams, inputs, z0=None, step_perturbation=None,
                dt: float = 1.0) -> ForwardTrace:
        x = np.asarray(inputs, dtype=np.float64)
        B, T, I = x.shape
        H = params.H
        if I != params.I:
            raise ValueError(f"input dim {I} != U_* dim {params.I}")
        z = np.zeros((B, T, H))
        if z0 is not None:
            z[:, 0] = np.asarray(z0, dtype=np.float64)
        pert = None if step_perturbation is None else as_array(step_perturbation)
        xz = x @ params.U_z.T
        xr = x @ params.U_r.T
        xc = x @ params.U_c.T
        u = np.zeros((B, T, H))
        r = np.zeros((B, T, H))
        c = np.zeros((B, T, H))
        for t in range(T):
            zt = z[:, t]
            u[:, t] = _logistic(zt @ params.W_z.T + xz[:, t] + params.b_z)
            r[:, t] = _logistic(zt @ params.W_r.T + xr[:, t] + params.b_r)
            c[:, t] = np.tanh((r[:, t] * zt) @ params.W_c.T + xc[:, t] + params.b_c)
            if t < T - 1:
                znew = u[:, t] * zt + (1.0 - u[:, t]) * c[:, t]
                if pert is not None:
                    znew = znew + pert[:, t]
                check_finite_step(znew, t)
                z[:, t + 1] = znew
        return ForwardTrace(model=self, params=params, inputs=x, z=Traj3(z, dt),
                            caches={"u": u, "r": r, "c": c})

    def cache_at(self, trace: ForwardTrace, t: int) -> dict:
        p = trace.params
        zt = trace.z.data[:, t]
        xt = trace.inputs[:, t]
        u = _logistic(zt @ p.W_z.T + xt @ p.U_z.T + p.b_z)
        r = _logistic(zt @ p.W_r.T + xt @ p.U_r.T + p.b_r)
        c = np.tanh((r * zt) @ p.W_c.T + xt @ p.U_c.T + p.b_c)
        return {"u": u, "r": r, "c": c}

    def _gates(self, trace, t, trial_slice=None):
        u = trace.caches["u"][:, t]
        r = trace.caches["r"][:, t]
        c = trace.caches["c"][:, t]
        z = trace.z.data[:, t]
        if trial_slice is not None:
            u, r, c, z = u[trial_slice], r[trial_slice], c[trial_slice], z[trial_slice]
        return u, r, c, z

    # -- hidden-state Jacobian actions ----------------------------------------
    #
    # dz' = u*dz + (z - c)*du + (1 - u)*dc
    #   du = u(1-u) * (W_z dz)
    #   dr = r(1-r) * (W_r dz)
    #   dc = (1-c^2) * (W_c (r*dz + z*dr))

    def jac_apply_all(self, trace, t, V, trial_slice=None):
        p = trace.params
        u, r, c, z = self._gates(trace, t, trial_slice)
        du = (u * (1.0 - u)) * (V @ p.W_z.T)
        dr = (r * (1.0 - r)) * (V @ p.W_r.T)
        dc = (1.0 - c * c) * ((r * V + z * dr) @ p.W_c.T)
        return u * V + (z - c) * du + (1.0 - u) * dc

    def jac_tapply_all(self, trace, t, V, trial_slice=None):
        p = trace.params
        u, r, c, z = self._gates(trace, t, trial_slice)
        g_c = ((1.0 - c * c) * (1.0 - u) * V) @ p.W_c
        g_r = ((z * g_c) * (r * (1.0 - r))) @ p.W_r
        g_u = (((z - c) * (u * (1.0 - u))) * V) @ p.W_z
        return u * V + g_u + r * g_c + g_r

    def jac_matrices(self, trace, t) -> np.ndarray:
        p = trace.params
        u, r, c, z = self._gates(trace, t)
        B, H = u.shape
        eye = np.eye(H)
        term_u = ((z - c) * (u * (1.0 - u)))[:, :, None] * p.W_z[None]
        # inner[b] = diag(r) + diag(z * r') W_r
        inner = r[:, :, None] * eye[None] + (z * r * (1.0 - r))[:, :, None] * p.W_r[None]
        term_c = ((1.0 - u) * (1.0 - c * c))[:, :, None] * (p.W_c[None] @ inner)
        return u[:, :, None] * eye[None] + term_u + term_c

    # -- parameter Jacobian actions --------------------------------------------

    def param_blocks(self, params: GruParams):
        return [("W_c", params.W_c), ("W_r", params.W_r), ("W_z", params.W_z),
                ("U_c", params.U_c), ("U_r", params.U_r), ("U_z", params.U_z),
                ("b_c", params.b_c), ("b_r", params.b_r), ("b_z", params.b_z)]

    def rebuild_params(self, params_like: GruParams, blocks: dict) -> GruParams:
        return replace(params_like, **blocks)

    def param_vjp(self, trace: ForwardTrace, q) -> np.ndarray:
        p = trace.params
        qd = as_array(q)
        if qd.shape != trace.z.shape:
            raise ValueError(f"q shape {qd.shape} != state shape {trace.z.shape}")
        B, T, H = qd.shape
        S = slice(0, T - 1)
        qs = qd[:, S]
        u, r, c = trace.caches["u"][:, S], trace.caches["r"][:, S], trace.caches["c"][:, S]
        z = trace.z.data[:, S]
        x = trace.inputs[:, S]
        # cotangents on the gate pre-activations
        A = (z - c) * (u * (1.0 - u)) * qs                 # update-gate path
        C = (1.0 - u) * (1.0 - c * c) * qs                 # candidate path
        R = (z * (C @ p.W_c)) * (r * (1.0 - r))            # reset path via candidate
        Af, Cf, Rf = (m.reshape(-1, H) for m in (A, C, R))
        zf = z.reshape(-1, H)
        rhf = (r * z).reshape(-1, H)
        xf = x.reshape(-1, x.shape[2])
        gW_c = (Cf.T @ rhf) / B
        gW_r = (Rf.T @ zf) / B
        gW_z = (Af.T @ zf) / B
        gU_c = (Cf.T @ xf) / B
        gU_r = (Rf.T @ xf) / B
        gU_z = (Af.T @ xf) / B
        gb_c = Cf.sum(axis=0) / B
        gb_r = Rf.sum(axis=0) / B
        gb_z = Af.sum(axis=0) / B
        return np.concatenate([gW_c.ravel(), gW_r.ravel(), gW_z.ravel(),
                               gU_c.ravel(), gU_r.ravel(), gU_z.ravel(),
                               gb_c, gb_r, gb_z])

    def param_jvp(self, trace: ForwardTrace, dvec) -> Traj3:
        p = trace.params
        d = self.vector_to_params(p, dvec)
        B, T, H = trace.z.shape
        S = slice(0, T - 1)
        u, r, c = trace.caches["u"][:, S], trace.caches["r"][:, S], trace.caches["c"][:, S]
        z = trace.z.data[:, S]
        x = trace.inputs[:, S]
        du = (u * (1.0 - u)) * (z @ d.W_z.T + x @ d.U_z.T + d.b_z)
        dr = (r * (1.0 - r)) * (z @ d.W_r.T + x @ d.U_r.T + d.b_r)
        dc = (1.0 - c * c) * ((r * z) @ d.W_c.T + x @ d.U_c.T + d.b_c + (z * dr) @ p.W_c.T)
        out = np.zeros((B, T, H))
        out[:, S] = (z - c) * du + (1.0 - u) * dc
        return Traj3(out, trace.z.dt)
