"""Run-directory plumbing: manifests, loss curves, parameter snapshots and
spectra emission. Every artifact a command writes lives under its run
directory, and nothing written depends on wall-clock time, so a rerun with
the same seed is byte-identical.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import __version__
from .config import build_model, build_readout, build_task, build_train_config, config_hash
from .kpf1 import read_kpf1, write_kpf1
from .models.base import readout
from .operators import average, make_k, make_p
from .spectral import top_svd
from .tasks import gen_batch, noise_free
from .trajspace import effdim
from .training import loss_and_err, make_pools, train


def _float_repr(x) -> str:
    return repr(float(x))


def write_manifest(out_dir: str, cfg: dict, extra: dict | None = None) -> None:
    doc = {"config": cfg, "config_sha256": config_hash(cfg),
           "version": __version__}
    if extra:
        doc.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)


def write_loss_csv(out_dir: str, losses, eval_iters, eval_losses,
                   name: str = "loss.csv") -> None:
    ev = {int(i): l for i, l in zip(eval_iters, eval_losses)}
    with open(os.path.join(out_dir, name), "w") as fh:
        fh.write("iter,loss,eval_loss\n")
        for i, loss in enumerate(losses):
            it = i + 1
            tail = _float_repr(ev[it]) if it in ev else ""
            fh.write(f"{it},{_float_repr(loss)},{tail}\n")


def save_snapshot(path_base: str, model, params, W_out, b_out, iteration: int) -> None:
    """Full trainable state (recurrent blocks plus readout) as KPF1 + sidecar."""
    blocks = model.param_blocks(params) + [("W_out", W_out), ("b_out", b_out)]
    vec = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for _, a in blocks])
    write_kpf1(path_base + ".kpf", vec, 1.0)
    sidecar = {"model": model.name, "iteration": iteration,
               "order": [], "meta": model.param_meta(params)}
    off = 0
    for name, a in blocks:
        sidecar["order"].append({"name": name, "shape": list(np.asarray(a).shape),
                                 "offset": off})
        off += int(np.asarray(a).size)
    with open(path_base + ".json", "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=1)


def load_snapshot(path_base: str, model, params_like, W_out_like):
    vec, _ = read_kpf1(path_base + ".kpf")
    n_rec = model.n_params(params_like)
    n_w = W_out_like.size
    params = model.vector_to_params(params_like, vec[:n_rec])
    W_out = vec[n_rec:n_rec + n_w].reshape(W_out_like.shape).copy()
    b_out = vec[n_rec + n_w:].copy()
    return params, W_out, b_out


def consensus_rank_report(model, params, inputs, axes, k: int = 20,
                          seed: int = 0) -> dict:
    """Consensus effective ranks of the parameter operator (sv energies) and
    the propagator (squared energies) on one batch of inputs, plus the
    hidden-state dimension."""
    trace = model.forward(params, inputs)
    k_red = average(make_k(trace), axes)
    p_red = average(make_p(trace), axes)
    sk = top_svd(k_red, k, seed=seed, want_functions=False)
    sp = top_svd(p_red, k, seed=seed, want_functions=False)
    return {
        "axes": sorted(axes),
        "effrank_k_sv": sk.effective_ranks["sv"],
        "effrank_k_sv_squared": sk.effective_ranks["sv_squared"],
        "effrank_p_sv": sp.effective_ranks["sv"],
        "effrank_p_sv_squared": sp.effective_ranks["sv_squared"],
        "k_values": [float(v) for v in sk.singular_values[:k]],
        "p_values": [float(v) for v in sp.singular_values[:k]],
        "hidden_effdim": effdim(trace.z),
    }


def run_train(cfg: dict, out_dir: str) -> dict:
    """Execute one training run from a validated config; returns a result
    summary (also written into the manifest)."""
    os.makedirs(out_dir, exist_ok=True)
    model, params = build_model(cfg)
    W_out, b_out = build_readout(cfg)
    spec = build_task(cfg)
    tc = build_train_config(cfg)
    an = cfg["analysis"]
    axes = tuple(an["consensus_axes"])
    pool, ev = make_pools(spec, tc)

    spectra_records = []

    def spectra_hook(iteration, mdl, prm, wo, bo):
        rep = consensus_rank_report(mdl, prm, ev.inputs, axes, k=an["spectra_k"],
                                    seed=cfg["seed"])
        rep["iteration"] = iteration
        spectra_records.append(rep)
        return rep

    hooks = []
    if an["spectra_every"]:
        tc.snapshot_every = an["spectra_every"]  # spectra cadence drives snapshots
        hooks.append(spectra_hook)

    record = train(model, params, W_out, b_out, pool, ev, tc, hooks=hooks)

    write_loss_csv(out_dir, record.losses, record.eval_iters, record.eval_losses)
    snap_dir = os.path.join(out_dir, "snapshots")
    os.makedirs(snap_dir, exist_ok=True)
    for it, flat in record.snapshots:
        n_rec = model.n_params(record.params)
        prm = model.vector_to_params(record.params, flat[:n_rec])
        wo = flat[n_rec:n_rec + W_out.size].reshape(W_out.shape)
        bo = flat[n_rec + W_out.size:]
        save_snapshot(os.path.join(snap_dir, f"iter_{it:07d}"), model, prm, wo, bo, it)
    save_snapshot(os.path.join(out_dir, "params_final"), model, record.params,
                  record.W_out, record.b_out, len(record.losses))
    if spectra_records:
        with open(os.path.join(out_dir, "spectra.json"), "w") as fh:
            json.dump(spectra_records, fh, sort_keys=True, indent=1)
    result = {
        "iterations": int(len(record.losses)),
        "converged_at": None if record.converged_at is None else int(record.converged_at),
        "diverged": bool(record.diverged),
        "final_loss": float(record.losses[-1]) if record.losses.size else None,
        "final_eval_loss": float(record.eval_losses[-1]) if record.eval_losses.size else None,
    }
    if spectra_records:
        result["spectra_first"] = {k: spectra_records[0][k] for k in
                                   ("effrank_k_sv", "effrank_p_sv_squared", "hidden_effdim")}
    write_manifest(out_dir, cfg, {"result": result})
    return result
