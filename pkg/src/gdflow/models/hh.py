"""Network of Hodgkin-Huxley neurons coupled through a smooth voltage readout.

State per neuron is (V, m, n, h); the network state stacks them as a 4H
vector [V, m, n, h]. Dynamics (classical squid-axon rates, V in mV, explicit
Euler with step dt_hh):

    dV/dt = -(g_K n^4 (V - V_K) + g_Na m^3 h (V - V_Na) + g_l (V - V_l))
            + W sigma(V) + W_in x(t) + I_app
    dk/dt = alpha_k(V) (1 - k) - beta_k(V) k          for k in {m, n, h}

    sigma(V) = logistic((V - V_t) / K_p)

Only W and W_in are treated as trainable; this model exists to exercise
operator construction on a biophysical system, not to be trained. Gating
variables are clamped to [0, 1] if an Euler step overshoots; clamp events are
counted in the trace metadata. Rate-function constants follow the classical
squid-axon parameterization.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..trajspace import Traj3
from .base import ForwardTrace, ModelBase, as_array, check_finite_step


@dataclass
class HhParams:
    g_K: np.ndarray    # [H] potassium conductance
    g_Na: np.ndarray   # [H] sodium conductance
    g_l: np.ndarray    # [H] leak conductance
    V_K: np.ndarray    # [H] reversal potentials (mV)
    V_Na: np.ndarray
    V_l: np.ndarray
    W: np.ndarray      # [H, H] recurrent coupling of sigma(V)
    W_in: np.ndarray   # [H, I]
    I_app: np.ndarray  # [H] applied current
    V_t: float = -20.0  # readout threshold (mV)
    K_p: float = 5.0    # readout sharpness
    dt_hh: float = 0.01

    def __post_init__(self):
        H = self.W.shape[0]
        for v in (self.g_K, self.g_Na, self.g_l, self.V_K, self.V_Na, self.V_l, self.I_app):
            if np.asarray(v).shape != (H,):
                raise ValueError("per-neuron parameter arrays must be [H]")
        for v in (self.g_K, self.g_Na, self.g_l):
            if np.any(np.asarray(v) < 0):
                raise ValueError("conductances must be non-negative")
        if not self.K_p > 0:
            raise ValueError("K_p must be positive")

    @property
    def H(self) -> int:
        return self.W.shape[0]

    @property
    def I(self) -> int:
        return self.W_in.shape[1]


def hh_init(H: int, I: int, seed: int, coupling_scale: float = 0.5,
            dt_hh: float = 0.01) -> HhParams:
    rng = np.random.default_rng(seed)
    ones = np.ones(H)
    return HhParams(
        g_K=36.0 * ones, g_Na=120.0 * ones, g_l=0.3 * ones,
        V_K=-77.0 * ones, V_Na=50.0 * ones, V_l=-54.387 * ones,
        W=rng.normal(0.0, coupling_scale / np.sqrt(H), size=(H, H)),
        W_in=rng.normal(0.0, 1.0 / np.sqrt(I), size=(H, I)),
        I_app=10.0 * ones, dt_hh=dt_hh)


def _g(x):
    """x / (1 - exp(-x)), series near 0; appears in the m and n opening rates."""
    x = np.asarray(x, dtype=np.float64)
    small = np.abs(x) < 1e-4
    safe = np.where(small, 1.0, x)
    out = np.where(small, 1.0 + x / 2.0 + x * x / 12.0,
                   safe / (1.0 - np.exp(-safe)))
    return out


def _dg(x):
    x = np.asarray(x, dtype=np.float64)
    small = np.abs(x) < 1e-4
    safe = np.where(small, 1.0, x)
    e = np.exp(-safe)
    denom = (1.0 - e)
    out = np.where(small, 0.5 + x / 6.0, (denom - safe * e) / (denom * denom))
    return out


def _rates(V):
    """Classical rate functions and their V-derivatives, all [B, H] maps."""
    am = _g((V + 40.0) / 10.0)
    dam = _dg((V + 40.0) / 10.0) / 10.0
    bm = 4.0 * np.exp(-(V + 65.0) / 18.0)
    dbm = -bm / 18.0
    an = 0.1 * _g((V + 55.0) / 10.0)
    dan = 0.01 * _dg((V + 55.0) / 10.0)
    bn = 0.125 * np.exp(-(V + 65.0) / 80.0)
    dbn = -bn / 80.0
    ah = 0.07 * np.exp(-(V + 65.0) / 20.0)
    dah = -ah / 20.0
    s = 1.0 / (1.0 + np.exp(-(V + 35.0) / 10.0))
    bh = s
    dbh = s * (1.0 - s) / 10.0
    return {"am": am, "bm": bm, "an": an, "bn": bn, "ah": ah, "bh": bh,
            "dam": dam, "dbm": dbm, "dan": dan, "dbn": dbn, "dah": dah, "dbh": dbh}


def hh_rest_state(params: HhParams, V0: float = -65.0) -> np.ndarray:
    """[4H] state with gates at their V0 steady state."""
    H = params.H
    r = _rates(np.full(H, V0))
    return np.concatenate([np.full(H, V0),
                           r["am"] / (r["am"] + r["bm"]),
                           r["an"] / (r["an"] + r["bn"]),
                           r["ah"] / (r["ah"] + r["bh"])])


class HhModel(ModelBase):
    name = "hh"

    @staticmethod
    def split(state, H):
        return state[..., 0:H], state[..., H:2 * H], state[..., 2 * H:3 * H], state[..., 3 * H:4 * H]

    def _sigma(self, params, V):
        s = 1.0 / (1.0 + np.exp(-(V - params.V_t) / params.K_p))
        return s, s * (1.0 - s) / params.K_p

    def _field(self, params, state, xt):
        """Vector field [B, 4H] at one timestep."""
        H = params.H
        V, m, n, h = self.split(state, H)
        r = _rates(V)
        sig, _ = self._sigma(params, V)
        ionic = (params.g_K * n ** 4 * (V - params.V_K)
                 + params.g_Na * m ** 3 * h * (V - params.V_Na)
                 + params.g_l * (V - params.V_l))
        fV = -ionic + sig @ params.W.T + xt @ params.W_in.T + params.I_app
        fm = r["am"] * (1.0 - m) - r["bm"] * m
        fn = r["an"] * (1.0 - n) - r["bn"] * n
        fh = r["ah"] * (1.0 - h) - r["bh"] * h
        return np.concatenate([fV, fm, fn, fh], axis=-1)

    def forward(self, params: HhParams, inputs, z0=None, step_perturbation=None,
                dt: float | None = None) -> ForwardTrace:
        x = np.asarray(inputs, dtype=np.float64)
        B, T, I = x.shape
        H = params.H
        if I != params.I:
            raise ValueError(f"input dim {I} != W_in dim {params.I}")
        if z0 is None:
            z0 = hh_rest_state(params)
        pert = None if step_perturbation is None else as_array(step_perturbation)
        z = np.zeros((B, T, 4 * H))
        z[:, 0] = np.asarray(z0, dtype=np.float64)
        clamped = 0
        for t in range(T - 1):
            znew = z[:, t] + params.dt_hh * self._field(params, z[:, t], x[:, t])
            if pert is not None:
                znew = znew + pert[:, t]
            check_finite_step(znew, t)
            gates = znew[:, H:]
            out_of_range = (gates < 0.0) | (gates > 1.0)
            if np.any(out_of_range):
                clamped += int(out_of_range.sum())
                znew = znew.copy()
                znew[:, H:] = np.clip(gates, 0.0, 1.0)
            z[:, t + 1] = znew
        caches = self._caches(params, z)
        return ForwardTrace(model=self, params=params, inputs=x,
                            z=Traj3(z, dt if dt is not None else params.dt_hh),
                            caches=caches, meta={"clamp_events": clamped})

    def _caches(self, params, z):
        V = z[..., :params.H]
        r = _rates(V)
        sig, dsig = self._sigma(params, V)
        r["sigma"] = sig
        r["dsigma"] = dsig
        return r

    def cache_at(self, trace: ForwardTrace, t: int) -> dict:
        full = self._caches(trace.params, trace.z.data[:, t:t + 1])
        return {k: v[:, 0] for k, v in full.items()}

    # -- hidden-state Jacobian of the Euler map: Id + dt * Df ------------------

    def _df_blocks(self, trace, t, trial_slice):
        p = trace.params
        H = p.H
        z = trace.z.data[:, t]
        ca = {k: trace.caches[k][:, t] for k in trace.caches}
        if trial_slice is not None:
            z = z[trial_slice]
            ca = {k: v[trial_slice] for k, v in ca.items()}
        V, m, n, h = self.split(z, H)
        dVV = -(p.g_K * n ** 4 + p.g_Na * m ** 3 * h + p.g_l)
        dVm = -3.0 * p.g_Na * m ** 2 * h * (V - p.V_Na)
        dVn = -4.0 * p.g_K * n ** 3 * (V - p.V_K)
        dVh = -p.g_Na * m ** 3 * (V - p.V_Na)
        gate = {}
        for k, kv in (("m", m), ("n", n), ("h", h)):
            gate[k] = (ca["da" + k] * (1.0 - kv) - ca["db" + k] * kv,   # d f_k / dV
                       -(ca["a" + k] + ca["b" + k]))                    # d f_k / dk
        return ca, dVV, dVm, dVn, dVh, gate

    def jac_apply_all(self, trace, t, Vv, trial_slice=None):
        p = trace.params
        H = p.H
        ca, dVV, dVm, dVn, dVh, gate = self._df_blocks(trace, t, trial_slice)
        vV, vm, vn, vh = self.split(Vv, H)
        outV = dVV * vV + (ca["dsigma"] * vV) @ p.W.T + dVm * vm + dVn * vn + dVh * vh
        outm = gate["m"][0] * vV + gate["m"][1] * vm
        outn = gate["n"][0] * vV + gate["n"][1] * vn
        outh = gate["h"][0] * vV + gate["h"][1] * vh
        return Vv + p.dt_hh * np.concatenate([outV, outm, outn, outh], axis=-1)

    def jac_tapply_all(self, trace, t, Vv, trial_slice=None):
        p = trace.params
        H = p.H
        ca, dVV, dVm, dVn, dVh, gate = self._df_blocks(trace, t, trial_slice)
        wV, wm, wn, wh = self.split(Vv, H)
        outV = (dVV * wV + ca["dsigma"] * (wV @ p.W)
                + gate["m"][0] * wm + gate["n"][0] * wn + gate["h"][0] * wh)
        outm = dVm * wV + gate["m"][1] * wm
        outn = dVn * wV + gate["n"][1] * wn
        outh = dVh * wV + gate["h"][1] * wh
        return Vv + p.dt_hh * np.concatenate([outV, outm, outn, outh], axis=-1)

    def jac_matrices(self, trace, t) -> np.ndarray:
        """Explicit [B, 4H, 4H] Jacobians, assembled from basis actions."""
        B = trace.B
        Hs = trace.H_state
        out = np.zeros((B, Hs, Hs))
        eye = np.eye(Hs)
        for j in range(Hs):
            col = self.jac_apply_all(trace, t, np.tile(eye[j], (B, 1)))
            out[:, :, j] = col
        return out

    # -- parameter Jacobian actions (W and W_in only) ---------------------------

    def param_blocks(self, params: HhParams):
        return [("W", params.W), ("W_in", params.W_in)]

    def rebuild_params(self, params_like: HhParams, blocks: dict) -> HhParams:
        return replace(params_like, W=blocks["W"], W_in=blocks["W_in"])

    def param_meta(self, params: HhParams) -> dict:
        return {"dt_hh": params.dt_hh, "V_t": params.V_t, "K_p": params.K_p}

    def param_vjp(self, trace: ForwardTrace, q) -> np.ndarray:
        p = trace.params
        qd = as_array(q)
        if qd.shape != trace.z.shape:
            raise ValueError(f"q shape {qd.shape} != state shape {trace.z.shape}")
        B, T, _ = qd.shape
        qV = qd[:, :T - 1, :p.H].reshape(-1, p.H)
        sig = trace.caches["sigma"][:, :T - 1].reshape(-1, p.H)
        x = trace.inputs[:, :T - 1].reshape(-1, trace.inputs.shape[2])
        scale = p.dt_hh / B
        gW = scale * (qV.T @ sig)
        gWin = scale * (qV.T @ x)
        return np.concatenate([gW.ravel(), gWin.ravel()])

    def param_jvp(self, trace: ForwardTrace, dvec) -> Traj3:
        p = trace.params
        d = self.vector_to_params(p, dvec)
        B, T, Hs = trace.z.shape
        out = np.zeros((B, T, Hs))
        sig = trace.caches["sigma"][:, :T - 1]
        x = trace.inputs[:, :T - 1]
        out[:, :T - 1, :p.H] = p.dt_hh * (sig @ d.W.T + x @ d.W_in.T)
        return Traj3(out, trace.z.dt)
