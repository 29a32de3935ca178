"""Adjoint (backprop-through-time) gradients, the masked MSE loss with a
trained linear readout, Adam with global-norm gradient clipping, and the
training loop with convergence threshold, evaluation cadence and snapshot
hooks.

Scaling conventions worth keeping straight: `loss_and_err` returns the exact
gradient of the scalar loss with respect to the hidden state (so it carries
the 1/(B*T*O) normalization). The parameter vjp averages over trials, so
`adjoint_backward` multiplies by B to undo that and return the true gradient
of the mean loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .models.base import readout
from .tasks import TrialBatch, gen_batch, noise_free
from .trajspace import Traj3


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip_norm: float | None = 1e-4
    batch_size: int = 64
    max_iters: int = 2000
    convergence_loss_threshold: float = 0.01665
    seed: int = 0
    snapshot_every: int = 0
    eval_every: int = 10
    pool_size: int = 3000
    eval_size: int = 30
    use_adam: bool = True
    stop_on_convergence: bool = True  # off: record first crossing, keep training

    def __post_init__(self):
        if self.learning_rate < 0 or self.eps <= 0:
            raise ValueError("rates must be positive")
        if self.convergence_loss_threshold <= 0:
            raise ValueError("convergence threshold must be positive")


@dataclass
class TrainRecord:
    losses: np.ndarray
    eval_iters: np.ndarray
    eval_losses: np.ndarray
    converged_at: int | None
    snapshots: list
    hook_results: list
    diverged: bool
    params: object
    W_out: np.ndarray
    b_out: np.ndarray


def loss_and_err(trace, W_out, b_out, batch: TrialBatch):
    """Masked mean-squared readout loss and its exact hidden-state gradient.

    loss = (1 / (B T O)) sum_bt mask * |W_out z + b_out - y*|^2
    err[b, t] = (2 / (B T O)) * mask * W_out^T (y - y*)
    """
    y = readout(trace.z, W_out, b_out)
    B, T, O = y.shape
    if batch.targets.shape != (B, T, O):
        raise ValueError(f"target shape {batch.targets.shape} != output shape {(B, T, O)}")
    d = (y - batch.targets) * batch.loss_mask[:, :, None]
    k = B * T * O
    loss = float((d * d).sum() / k)
    err = Traj3((2.0 / k) * (d @ W_out), trace.z.dt)
    return loss, err


def adjoint_backward(trace, err, W_out=None, b_out=None, batch: TrialBatch | None = None):
    """Backward recursion and parameter gradient.

    Returns (a, grad, grad_Wout, grad_bout). `a` is stored in transition
    slots: a[b, t] is the loss gradient at the state z[b, t+1], i.e. the
    cotangent of transition t, with the final slot zero; it equals the
    propagator adjoint applied to err. `grad` is B * param_vjp(trace, a),
    the true gradient of the (trial-mean) loss. Readout gradients are
    computed by direct accumulation when W_out and the batch are given.
    """
    model = trace.model
    e = err.data if isinstance(err, Traj3) else np.asarray(err, dtype=np.float64)
    B, T, H = trace.z.shape
    a = np.zeros((B, T, H))
    if T >= 2:
        a[:, T - 2] = e[:, T - 1]
        for s in range(T - 3, -1, -1):
            a[:, s] = model.jac_tapply_all(trace, s + 1, a[:, s + 1]) + e[:, s + 1]
    grad = B * model.param_vjp(trace, a)
    grad_Wout = grad_bout = None
    if W_out is not None and batch is not None:
        y = readout(trace.z, W_out, b_out)
        O = y.shape[2]
        d = (y - batch.targets) * batch.loss_mask[:, :, None]
        scale = 2.0 / (B * T * O)
        grad_Wout = scale * (d.reshape(-1, O).T @ trace.z.data.reshape(-1, H))
        grad_bout = scale * d.reshape(-1, O).sum(axis=0)
    return Traj3(a, trace.z.dt), grad, grad_Wout, grad_bout


def clip_gradient(g: np.ndarray, clip_norm: float | None) -> np.ndarray:
    if clip_norm is None:
        return g
    gn = float(np.linalg.norm(g))
    if gn > clip_norm:
        return g * (clip_norm / gn)
    return g


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def fresh(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), t=0)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray,
              config: TrainConfig):
    """One bias-corrected step; global-norm clipping is applied to the raw
    gradient before the moment update. Returns (new_params, new_state)."""
    g = clip_gradient(grads, config.grad_clip_norm)
    t = state.t + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * g
    v = config.beta2 * state.v + (1.0 - config.beta2) * g * g
    mhat = m / (1.0 - config.beta1 ** t)
    vhat = v / (1.0 - config.beta2 ** t)
    new_params = params - config.learning_rate * mhat / (np.sqrt(vhat) + config.eps)
    return new_params, AdamState(m=m, v=v, t=t)


def _pack(model, params, W_out, b_out):
    return np.concatenate([model.params_to_vector(params), W_out.ravel(), b_out])


def _unpack(model, params_like, W_out_like, flat):
    n_rec = model.n_params(params_like)
    n_w = W_out_like.size
    params = model.vector_to_params(params_like, flat[:n_rec])
    W_out = flat[n_rec:n_rec + n_w].reshape(W_out_like.shape).copy()
    b_out = flat[n_rec + n_w:].copy()
    return params, W_out, b_out


def train(model, params, W_out, b_out, pool: TrialBatch, eval_batch: TrialBatch,
          config: TrainConfig, hooks=()) -> TrainRecord:
    """Minibatch training against a fixed pre-generated trial pool.

    Stops at max_iters or at the first evaluation (every `eval_every`
    iterations, on the noise-free eval batch) whose loss falls below the
    convergence threshold. Hooks fire every `snapshot_every` iterations with
    the pre-update parameters and may return anything; results are collected.
    """
    from .tasks import batch_subset  # local import to keep module load light

    rng = np.random.default_rng([config.seed, 101])
    flat = _pack(model, params, np.asarray(W_out, dtype=np.float64),
                 np.asarray(b_out, dtype=np.float64))
    state = AdamState.fresh(flat.size)
    losses, eval_iters, eval_losses = [], [], []
    snapshots, hook_results = [], []
    converged_at = None
    diverged = False
    cur_params, cur_W, cur_b = _unpack(model, params, np.asarray(W_out), flat)

    from .models.base import DivergenceError

    full_batch = config.batch_size >= pool.B
    for i in range(config.max_iters):
        if config.snapshot_every and i % config.snapshot_every == 0:
            snapshots.append((i, flat.copy()))
            for hook in hooks:
                hook_results.append((i, hook(i, model, cur_params, cur_W, cur_b)))
        if full_batch:
            sub = pool
        else:
            idx = rng.integers(0, pool.B, size=config.batch_size)
            sub = batch_subset(pool, idx)
        try:
            trace = model.forward(cur_params, sub.inputs)
        except DivergenceError:
            diverged = True
            break
        loss, err = loss_and_err(trace, cur_W, cur_b, sub)
        if not np.isfinite(loss):
            diverged = True
            break
        losses.append(loss)
        _, grad, gW, gb = adjoint_backward(trace, err, cur_W, cur_b, sub)
        gfull = np.concatenate([grad, gW.ravel(), gb])
        if config.use_adam:
            flat, state = adam_step(state, flat, gfull, config)
        else:
            flat = flat - config.learning_rate * clip_gradient(gfull, config.grad_clip_norm)
        cur_params, cur_W, cur_b = _unpack(model, params, np.asarray(W_out), flat)
        it = i + 1
        if config.eval_every and (it % config.eval_every == 0 or it == config.max_iters):
            etrace = model.forward(cur_params, eval_batch.inputs)
            eloss, _ = loss_and_err(etrace, cur_W, cur_b, eval_batch)
            eval_iters.append(it)
            eval_losses.append(eloss)
            if eloss < config.convergence_loss_threshold and converged_at is None:
                converged_at = it
                if config.stop_on_convergence:
                    break

    if config.snapshot_every:
        final_iter = len(losses)
        snapshots.append((final_iter, flat.copy()))
        for hook in hooks:
            hook_results.append((final_iter, hook(final_iter, model, cur_params, cur_W, cur_b)))
    return TrainRecord(
        losses=np.asarray(losses), eval_iters=np.asarray(eval_iters, dtype=np.int64),
        eval_losses=np.asarray(eval_losses), converged_at=converged_at,
        snapshots=snapshots, hook_results=hook_results, diverged=diverged,
        params=cur_params, W_out=cur_W, b_out=cur_b)


def make_pools(spec, config: TrainConfig):
    """Noisy training pool plus the noise-free evaluation set."""
    pool = gen_batch(spec, config.pool_size, seed=np.random.SeedSequence([config.seed, 7]))
    ev = gen_batch(noise_free(spec), config.eval_size,
                   seed=np.random.SeedSequence([config.seed, 11]))
    return pool, ev


def train_on_task(model, params, W_out, b_out, spec, config: TrainConfig,
                  hooks=()) -> TrainRecord:
    pool, ev = make_pools(spec, config)
    return train(model, params, W_out, b_out, pool, ev, config, hooks=hooks)
