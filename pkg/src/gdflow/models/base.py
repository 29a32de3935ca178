"""Shared model machinery: forward traces, flat parameter vectors, readout.

Every model exposes the same surface: a forward pass that caches whatever its
Jacobian actions need, hidden-state Jacobian actions (and transposes) that are
hand-derived and never materialize full Jacobians unless explicitly asked,
and parameter jvp/vjp in a frozen serialization order.

Indexing convention used throughout: a per-step perturbation tensor q[b, t]
attaches to the transition t -> t+1 (source-time indexing). The slot at
t = T-1 has no transition; param_vjp ignores it and param_jvp leaves it zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..kpf1 import read_kpf1, write_kpf1
from ..trajspace import Traj3


class DivergenceError(RuntimeError):
    """Forward simulation produced a non-finite state."""

    def __init__(self, trial: int, t: int):
        super().__init__(f"non-finite state at trial b={trial}, time t={t}")
        self.trial = trial
        self.t = t


@dataclass
class ForwardTrace:
    """Hidden states plus the cached nonlinearity values Jacobian actions need.

    `z.data` is [B, T, H_state]; `inputs` is [B, T, I]. `caches` holds
    model-specific arrays aligned with z (values at source time t).
    """

    model: object
    params: object
    inputs: np.ndarray
    z: Traj3
    caches: dict
    meta: dict = field(default_factory=dict)

    @property
    def B(self) -> int:
        return self.z.B

    @property
    def T(self) -> int:
        return self.z.T

    @property
    def H_state(self) -> int:
        return self.z.H

    def validate_cache(self, t: int | None = None, seed: int = 0) -> bool:
        """Recompute the cached values at one sampled timestep and check they
        match what the forward pass stored (guards against stale caches)."""
        if t is None:
            t = int(np.random.default_rng(seed).integers(0, self.T))
        fresh = self.model.cache_at(self, t)
        for name, arr in fresh.items():
            if not np.array_equal(arr, self.caches[name][:, t]):
                return False
        return True


def as_array(q) -> np.ndarray:
    """Accept Traj3 or a raw [B, T, H] array."""
    if isinstance(q, Traj3):
        return q.data
    return np.asarray(q, dtype=np.float64)


def check_finite_step(z_next: np.ndarray, t: int):
    if not np.all(np.isfinite(z_next)):
        bad = np.where(~np.isfinite(z_next).all(axis=1))[0]
        raise DivergenceError(int(bad[0]), t)


class ModelBase:
    """Common flat-vector plumbing. Subclasses define `param_block_names` via
    `param_blocks(params)` and the numeric kernels."""

    name = "model"

    # -- flat parameter vector ------------------------------------------------

    def param_blocks(self, params):
        """List of (name, array) in the frozen serialization order."""
        raise NotImplementedError

    def params_to_vector(self, params) -> np.ndarray:
        return np.concatenate([np.asarray(a, dtype=np.float64).ravel()
                               for _, a in self.param_blocks(params)])

    def n_params(self, params) -> int:
        return int(sum(np.asarray(a).size for _, a in self.param_blocks(params)))

    def vector_to_params(self, params_like, vec: np.ndarray):
        """Rebuild structured params from a flat vector (round-trips exactly)."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params(params_like):
            raise ValueError(f"expected {self.n_params(params_like)} entries, got {vec.size}")
        out = {}
        off = 0
        for name, a in self.param_blocks(params_like):
            n = np.asarray(a).size
            out[name] = vec[off:off + n].reshape(np.asarray(a).shape).copy()
            off += n
        return self.rebuild_params(params_like, out)

    def rebuild_params(self, params_like, blocks: dict):
        raise NotImplementedError

    def save_params(self, path_base: str, params) -> None:
        """KPF1 flat vector plus a JSON sidecar naming blocks and order."""
        vec = self.params_to_vector(params)
        write_kpf1(str(path_base) + ".kpf", vec, 1.0)
        sidecar = {"model": self.name, "order": [], "meta": self.param_meta(params)}
        off = 0
        for name, a in self.param_blocks(params):
            shape = list(np.asarray(a).shape)
            n = int(np.asarray(a).size)
            sidecar["order"].append({"name": name, "shape": shape, "offset": off})
            off += n
        with open(str(path_base) + ".json", "w") as fh:
            json.dump(sidecar, fh, sort_keys=True, indent=1)

    def load_params(self, path_base: str, params_like):
        vec, _ = read_kpf1(str(path_base) + ".kpf")
        return self.vector_to_params(params_like, vec)

    def param_meta(self, params) -> dict:
        return {}

    # -- per-(b, t) Jacobian actions (thin wrappers over the batched kernels) --

    def jac_z_apply(self, trace: ForwardTrace, b: int, t: int, v: np.ndarray) -> np.ndarray:
        """d z_{t+1} / d z_t applied to v at trial b."""
        self._check_bt(trace, b, t)
        return self.jac_apply_all(trace, t, np.asarray(v, dtype=np.float64)[None, :],
                                  trial_slice=np.array([b]))[0]

    def jac_z_tapply(self, trace: ForwardTrace, b: int, t: int, v: np.ndarray) -> np.ndarray:
        self._check_bt(trace, b, t)
        return self.jac_tapply_all(trace, t, np.asarray(v, dtype=np.float64)[None, :],
                                   trial_slice=np.array([b]))[0]

    @staticmethod
    def _check_bt(trace: ForwardTrace, b: int, t: int):
        if not 0 <= b < trace.B:
            raise IndexError(f"trial {b} out of range for B={trace.B}")
        if not 0 <= t < trace.T - 1:
            raise IndexError(f"no transition at t={t} (T={trace.T})")


def readout(z, W_out: np.ndarray, b_out: np.ndarray) -> np.ndarray:
    """Linear readout y[b, t] = W_out z[b, t] + b_out, shape [B, T, O]."""
    zd = as_array(z)
    W_out = np.asarray(W_out, dtype=np.float64)
    b_out = np.asarray(b_out, dtype=np.float64)
    if W_out.shape[1] != zd.shape[2] or b_out.shape[0] != W_out.shape[0]:
        raise ValueError(f"readout shapes {W_out.shape}, {b_out.shape} do not "
                         f"match state dim {zd.shape[2]}")
    return zd @ W_out.T + b_out
