"""Stimulus-reproduction task family: memory-pro / memory-anti / delay-pro /
delay-anti, with optional context channels for multi-task training.

A trial draws an angle theta on the circle. The two stimulus channels carry
(cos theta, sin theta) during the stimulus period (and through the response
period for the delay variants, where the stimulus never turns off). The target
is zero outside the response period and equals the stimulus coordinates during
it, sign-flipped for the anti variants. Context channels are one-hot per task
and active only during the initial context period.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, replace

import numpy as np

from .kpf1 import read_kpf1, write_kpf1

MEMORY_PRO = "memory_pro"
MEMORY_ANTI = "memory_anti"
DELAY_PRO = "delay_pro"
DELAY_ANTI = "delay_anti"
TASK_ORDER = (MEMORY_PRO, MEMORY_ANTI, DELAY_PRO, DELAY_ANTI)

PERIOD_CTX, PERIOD_STIM, PERIOD_MEM, PERIOD_RESP = 0, 1, 2, 3


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    T_ctx: int = 0
    T_stim: int = 30
    T_mem: int = 30
    T_resp: int = 30
    noise_std: float = 0.1
    n_context_channels: int = 0

    def __post_init__(self):
        if self.kind not in TASK_ORDER:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind in (DELAY_PRO, DELAY_ANTI) and self.T_mem != 0:
            raise ValueError("delay tasks have no memory period (T_mem must be 0)")
        if min(self.T_ctx, self.T_stim, self.T_mem, self.T_resp) < 0:
            raise ValueError("durations must be non-negative")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    @property
    def T(self) -> int:
        return self.T_ctx + self.T_stim + self.T_mem + self.T_resp

    @property
    def n_inputs(self) -> int:
        return 2 + self.n_context_channels

    @property
    def is_anti(self) -> bool:
        return self.kind in (MEMORY_ANTI, DELAY_ANTI)

    @property
    def is_delay(self) -> bool:
        return self.kind in (DELAY_PRO, DELAY_ANTI)


@dataclass
class TrialBatch:
    inputs: np.ndarray        # [B, T, I]
    targets: np.ndarray       # [B, T, 2]
    loss_mask: np.ndarray     # [B, T] in {0, 1}
    period_labels: np.ndarray  # [B, T] in {CTX, STIM, MEM, RESP}
    task_labels: np.ndarray   # [B]
    stim_angles: np.ndarray   # [B] radians
    dt: float = 1.0

    @property
    def B(self) -> int:
        return self.inputs.shape[0]

    @property
    def T(self) -> int:
        return self.inputs.shape[1]

    def task_partition(self) -> list:
        """Trial index lists per task label, in ascending label order."""
        labels = sorted(set(self.task_labels.tolist()))
        return [np.where(self.task_labels == lab)[0] for lab in labels]


def _periods(spec: TaskSpec):
    c0, c1 = 0, spec.T_ctx
    s0, s1 = c1, c1 + spec.T_stim
    m0, m1 = s1, s1 + spec.T_mem
    r0, r1 = m1, m1 + spec.T_resp
    return (c0, c1), (s0, s1), (m0, m1), (r0, r1)


def _clean_trial_arrays(spec: TaskSpec, angles: np.ndarray, context_index: int | None,
                        task_label: int):
    B = angles.shape[0]
    T = spec.T
    inputs = np.zeros((B, T, spec.n_inputs))
    targets = np.zeros((B, T, 2))
    periods = np.zeros((B, T), dtype=np.int8)
    (c0, c1), (s0, s1), (m0, m1), (r0, r1) = _periods(spec)
    periods[:, c0:c1] = PERIOD_CTX
    periods[:, s0:s1] = PERIOD_STIM
    periods[:, m0:m1] = PERIOD_MEM
    periods[:, r0:r1] = PERIOD_RESP
    coords = np.stack([np.cos(angles), np.sin(angles)], axis=1)  # [B, 2]
    inputs[:, s0:s1, 0:2] = coords[:, None, :]
    if spec.is_delay:
        inputs[:, r0:r1, 0:2] = coords[:, None, :]  # stimulus stays on
    sign = -1.0 if spec.is_anti else 1.0
    targets[:, r0:r1] = sign * coords[:, None, :]
    if context_index is not None:
        if not 0 <= context_index < spec.n_context_channels:
            raise ValueError("context channel index out of range")
        inputs[:, c0:c1, 2 + context_index] = 1.0
    mask = np.ones((B, T))
    labels = np.full(B, task_label, dtype=np.int64)
    return inputs, targets, mask, periods, labels


def gen_batch(spec: TaskSpec, B: int, seed: int, context_index: int | None = None,
              angles: np.ndarray | None = None, task_label: int = 0) -> TrialBatch:
    """Batch of B trials; angles ~ Uniform[0, 2pi) unless given. Noise of std
    `spec.noise_std` is added to every input channel; targets stay clean."""
    if B < 1:
        raise ValueError("B must be >= 1")
    rng = np.random.default_rng(seed)
    if angles is None:
        angles = rng.uniform(0.0, 2.0 * np.pi, size=B)
    else:
        angles = np.asarray(angles, dtype=np.float64)
    inputs, targets, mask, periods, labels = _clean_trial_arrays(
        spec, angles, context_index, task_label)
    if spec.noise_std > 0:
        inputs = inputs + rng.normal(0.0, spec.noise_std, size=inputs.shape)
    return TrialBatch(inputs=inputs, targets=targets, loss_mask=mask,
                      period_labels=periods, task_labels=labels, stim_angles=angles)


def gen_multitask_batch(specs, B_per_task: int, seed: int,
                        matched_stimuli: bool = True) -> TrialBatch:
    """Concatenated batch over the given specs, one-hot context per task.

    All specs must share the total duration T and declare one context channel
    per task. With `matched_stimuli` the same stimulus angles are used for
    every task sub-batch (required by the alignment analyses).
    """
    specs = list(specs)
    n_task = len(specs)
    T = specs[0].T
    for sp in specs:
        if sp.T != T:
            raise ValueError(f"all specs must share T; got {sp.T} vs {T}")
        if sp.n_context_channels != n_task:
            raise ValueError("n_context_channels must equal the number of tasks")
    ss = np.random.SeedSequence(seed)
    streams = ss.spawn(n_task + 1)
    shared_angles = None
    if matched_stimuli:
        shared_angles = np.random.default_rng(streams[0]).uniform(
            0.0, 2.0 * np.pi, size=B_per_task)
    parts = []
    for k, sp in enumerate(specs):
        sub_seed = streams[k + 1]
        sub = gen_batch(sp, B_per_task, np.random.default_rng(sub_seed).integers(2 ** 63),
                        context_index=k, angles=shared_angles, task_label=k)
        parts.append(sub)
    return TrialBatch(
        inputs=np.concatenate([p.inputs for p in parts], axis=0),
        targets=np.concatenate([p.targets for p in parts], axis=0),
        loss_mask=np.concatenate([p.loss_mask for p in parts], axis=0),
        period_labels=np.concatenate([p.period_labels for p in parts], axis=0),
        task_labels=np.concatenate([p.task_labels for p in parts], axis=0),
        stim_angles=np.concatenate([p.stim_angles for p in parts], axis=0))


def default_multitask_specs(noise_std: float = 0.1, T_ctx: int = 15) -> list:
    """The four-task set on a shared 90-step trial (context + 75 task steps)."""
    mem = dict(T_ctx=T_ctx, T_stim=25, T_mem=25, T_resp=25,
               noise_std=noise_std, n_context_channels=4)
    dly = dict(T_ctx=T_ctx, T_stim=50, T_mem=0, T_resp=25,
               noise_std=noise_std, n_context_channels=4)
    return [TaskSpec(MEMORY_PRO, **mem), TaskSpec(MEMORY_ANTI, **mem),
            TaskSpec(DELAY_PRO, **dly), TaskSpec(DELAY_ANTI, **dly)]


def alignment_filters():
    """(pro_anti, mem_del) 0/1 matrices over TASK_ORDER, selecting the
    same-orientation pairs {MP-DP, MA-DA} and the same-timing pairs
    {MP-MA, DP-DA} respectively; diagonals are zero."""
    pro_anti = np.zeros((4, 4))
    mem_del = np.zeros((4, 4))
    for i, j in ((0, 2), (1, 3)):
        pro_anti[i, j] = pro_anti[j, i] = 1.0
    for i, j in ((0, 1), (2, 3)):
        mem_del[i, j] = mem_del[j, i] = 1.0
    return pro_anti, mem_del


def noise_free(spec: TaskSpec) -> TaskSpec:
    return replace(spec, noise_std=0.0)


def batch_subset(batch: TrialBatch, idx) -> TrialBatch:
    idx = np.asarray(idx, dtype=np.intp)
    return TrialBatch(inputs=batch.inputs[idx], targets=batch.targets[idx],
                      loss_mask=batch.loss_mask[idx],
                      period_labels=batch.period_labels[idx],
                      task_labels=batch.task_labels[idx],
                      stim_angles=batch.stim_angles[idx], dt=batch.dt)


_BATCH_TENSORS = ("inputs", "targets", "loss_mask", "period_labels",
                  "task_labels", "stim_angles")


def save_batch(dir_path: str, batch: TrialBatch, spec=None, seed=None) -> None:
    """KPF1 tensor files plus a JSON manifest (spec, seed, tensor names)."""
    os.makedirs(dir_path, exist_ok=True)
    for name in _BATCH_TENSORS:
        write_kpf1(os.path.join(dir_path, f"{name}.kpf"),
                   np.asarray(getattr(batch, name), dtype=np.float64), batch.dt)
    if isinstance(spec, (list, tuple)):
        spec_doc = [asdict(s) for s in spec]
    elif spec is not None:
        spec_doc = asdict(spec)
    else:
        spec_doc = None
    manifest = {"tensors": list(_BATCH_TENSORS), "dt": batch.dt,
                "seed": seed, "spec": spec_doc}
    with open(os.path.join(dir_path, "batch.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)


def load_batch(dir_path: str) -> TrialBatch:
    arrays = {}
    dt = 1.0
    for name in _BATCH_TENSORS:
        arrays[name], dt = read_kpf1(os.path.join(dir_path, f"{name}.kpf"))
    return TrialBatch(inputs=arrays["inputs"], targets=arrays["targets"],
                      loss_mask=arrays["loss_mask"],
                      period_labels=arrays["period_labels"].astype(np.int8),
                      task_labels=arrays["task_labels"].astype(np.int64),
                      stim_angles=arrays["stim_angles"], dt=dt)
