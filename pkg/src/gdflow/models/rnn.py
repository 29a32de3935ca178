"""Leaky discrete-time RNN with tanh or relu activation.

Update rule (explicit Euler with step alpha on the usual rate dynamics):

    z[t+1] = (1 - alpha) * z[t] + alpha * (W sigma(z[t]) + W_in x[t] + b)

The transition Jacobian is (1 - alpha) I + alpha W diag(sigma'(z[t])), and
the parameter Jacobian actions are written out by hand below; neither is ever
materialized unless `jac_matrices` is called explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..trajspace import Traj3
from .base import ForwardTrace, ModelBase, as_array, check_finite_step


@dataclass
class RnnParams:
    W: np.ndarray          # [H, H] recurrent weights
    W_in: np.ndarray       # [H, I] input weights
    b: np.ndarray          # [H] bias
    alpha: float = 1.0     # Euler step in (0, 1]
    activation: str = "tanh"

    def __post_init__(self):
        H = self.W.shape[0]
        if self.W.shape != (H, H):
            raise ValueError(f"W must be square, got {self.W.shape}")
        if self.W_in.shape[0] != H or self.b.shape != (H,):
            raise ValueError("inconsistent parameter shapes")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def H(self) -> int:
        return self.W.shape[0]

    @property
    def I(self) -> int:
        return self.W_in.shape[1]


def rnn_init(H: int, I: int, g: float, seed: int, alpha: float = 1.0,
             activation: str = "tanh") -> RnnParams:
    """W entries ~ Normal(0, g^2 / H); input weights ~ Normal(0, 1/I); b = 0."""
    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, 1.0, size=(H, H)) * (g / np.sqrt(H))
    W_in = rng.normal(0.0, 1.0 / np.sqrt(I), size=(H, I))
    return RnnParams(W=W, W_in=W_in, b=np.zeros(H), alpha=alpha, activation=activation)


def _act(z, kind):
    if kind == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _dact(z, kind):
    if kind == "tanh":
        th = np.tanh(z)
        return 1.0 - th * th
    # relu subgradient: 0 at exactly z == 0
    return (z > 0.0).astype(np.float64)


class RnnModel(ModelBase):
    name = "rnn"

    def forward(self, params: RnnParams, inputs, z0=None, step_perturbation=None,
                dt: float = 1.0) -> ForwardTrace:
        x = np.asarray(inputs, dtype=np.float64)
        B, T, I = x.shape
        H = params.H
        if I != params.I:
            raise ValueError(f"input dim {I} != W_in dim {params.I}")
        z = np.zeros((B, T, H))
        if z0 is not None:
            z[:, 0] = np.asarray(z0, dtype=np.float64)
        pert = None if step_perturbation is None else as_array(step_perturbation)
        xin = x @ params.W_in.T  # hoisted input projection, [B, T, H]
        a = params.alpha
        for t in range(T - 1):
            s = _act(z[:, t], params.activation)
            znew = (1.0 - a) * z[:, t] + a * (s @ params.W.T + xin[:, t] + params.b)
            if pert is not None:
                znew = znew + pert[:, t]
            check_finite_step(znew, t)
            z[:, t + 1] = znew
        sigma = _act(z, params.activation)
        if params.activation == "tanh":
            dsigma = 1.0 - sigma * sigma
        else:
            dsigma = _dact(z, params.activation)
        return ForwardTrace(model=self, params=params, inputs=x,
                            z=Traj3(z, dt), caches={"sigma": sigma, "dsigma": dsigma})

    def cache_at(self, trace: ForwardTrace, t: int) -> dict:
        zt = trace.z.data[:, t]
        return {"sigma": _act(zt, trace.params.activation),
                "dsigma": _dact(zt, trace.params.activation)}

    # -- hidden-state Jacobian actions ----------------------------------------

    def jac_apply_all(self, trace, t, V, trial_slice=None):
        p = trace.params
        ds = trace.caches["dsigma"][:, t]
        if trial_slice is not None:
            ds = ds[trial_slice]
        return (1.0 - p.alpha) * V + p.alpha * ((ds * V) @ p.W.T)

    def jac_tapply_all(self, trace, t, V, trial_slice=None):
        p = trace.params
        ds = trace.caches["dsigma"][:, t]
        if trial_slice is not None:
            ds = ds[trial_slice]
        return (1.0 - p.alpha) * V + p.alpha * ds * (V @ p.W)

    def jac_matrices(self, trace, t) -> np.ndarray:
        """Explicit per-trial Jacobians [B, H, H] at source time t."""
        p = trace.params
        ds = trace.caches["dsigma"][:, t]
        eye = np.eye(p.H)
        return (1.0 - p.alpha) * eye[None] + p.alpha * (p.W[None] * ds[:, None, :])

    # -- parameter Jacobian actions --------------------------------------------

    def param_blocks(self, params: RnnParams):
        return [("W", params.W), ("W_in", params.W_in), ("b", params.b)]

    def rebuild_params(self, params_like: RnnParams, blocks: dict) -> RnnParams:
        return replace(params_like, W=blocks["W"], W_in=blocks["W_in"], b=blocks["b"])

    def param_meta(self, params: RnnParams) -> dict:
        return {"alpha": params.alpha, "activation": params.activation}

    def param_vjp(self, trace: ForwardTrace, q) -> np.ndarray:
        """Mean over trials of sum_t J_theta(t|b)^T q[b, t]; the slot at the
        final time has no transition and is ignored."""
        p = trace.params
        qd = as_array(q)
        if qd.shape != trace.z.shape:
            raise ValueError(f"q shape {qd.shape} != state shape {trace.z.shape}")
        B, T, H = qd.shape
        qf = qd[:, :T - 1].reshape(-1, H)  # flattened (trial, transition) rows
        sig = trace.caches["sigma"][:, :T - 1].reshape(-1, H)
        x = trace.inputs[:, :T - 1].reshape(-1, trace.inputs.shape[2])
        scale = p.alpha / B
        gW = scale * (qf.T @ sig)
        gWin = scale * (qf.T @ x)
        gb = scale * qf.sum(axis=0)
        return np.concatenate([gW.ravel(), gWin.ravel(), gb])

    def param_jvp(self, trace: ForwardTrace, dvec) -> Traj3:
        """Per-transition first-order output change under a parameter
        perturbation, holding states fixed; final slot stays zero."""
        p = trace.params
        d = self.vector_to_params(p, dvec)
        B, T, H = trace.z.shape
        out = np.zeros((B, T, H))
        sig = trace.caches["sigma"][:, :T - 1]
        x = trace.inputs[:, :T - 1]
        out[:, :T - 1] = p.alpha * (sig @ d.W.T + x @ d.W_in.T + d.b)
        return Traj3(out, trace.z.dt)
