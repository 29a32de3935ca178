"""Acceptance suite: one test per packaged acceptance criterion, each printing
a PASS/FAIL line with its measured quantities and enforcing its runtime
budget. Run with `pytest tests/test_acceptance.py -v -s`.

The two experiment-level criteria execute the full desk-scale experiment
drivers and dominate the suite's wall time.
"""

import time

import numpy as np
import pytest

from gdflow import operators as ops
from gdflow.analysis import ky_dimension, lyapunov_spectrum, verify_flow
from gdflow.models import GruModel, HhModel, RnnModel, RnnParams, gru_init, hh_init, rnn_init
from gdflow.spectral import top_svd
from gdflow.tasks import TaskSpec, gen_batch
from gdflow.trajspace import Traj3, effdim
from gdflow.training import adjoint_backward, loss_and_err

from helpers import materialize, random_batch, stub_trace


def _report(criterion, passed, detail):
    status = "PASS" if passed else "FAIL"
    print(f"[acceptance] criterion {criterion}: {status} ({detail})")
    assert passed, f"criterion {criterion} failed: {detail}"


def _budget(criterion, started, limit):
    elapsed = time.monotonic() - started
    assert elapsed < limit, f"criterion {criterion} exceeded {limit}s ({elapsed:.1f}s)"
    return elapsed


def _grad_check(model, params, batch, W_out, b_out, n_dirs, seed):
    trace = model.forward(params, batch.inputs)
    _, err = loss_and_err(trace, W_out, b_out, batch)
    _, grad, _, _ = adjoint_backward(trace, err, W_out, b_out, batch)
    vec = model.params_to_vector(params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    eps = 1e-6
    for _ in range(n_dirs):
        d = rng.standard_normal(vec.size)
        d /= np.linalg.norm(d)
        f = lambda v: loss_and_err(model.forward(model.vector_to_params(params, v),
                                                 batch.inputs), W_out, b_out, batch)[0]
        fd = (f(vec + eps * d) - f(vec - eps * d)) / (2 * eps)
        worst = max(worst, abs(fd - float(grad @ d)) / abs(fd))
    return worst


def test_criterion_1_gradient_correctness():
    """Adjoint gradients match central finite differences for RNN and GRU."""
    t0 = time.monotonic()
    rng = np.random.default_rng(100)
    rnn_batch = random_batch(4, 20, 2, 2, seed=101)
    rnn_worst = _grad_check(RnnModel(), rnn_init(16, 2, 1.2, seed=102, alpha=0.8),
                            rnn_batch, 0.4 * rng.standard_normal((2, 16)),
                            np.zeros(2), 10, seed=103)
    gru_batch = random_batch(3, 15, 2, 2, seed=104)
    gru_worst = _grad_check(GruModel(), gru_init(12, 2, 1.0, seed=105),
                            gru_batch, 0.4 * rng.standard_normal((2, 12)),
                            np.zeros(2), 10, seed=106)
    el = _budget(1, t0, 10.0)
    _report(1, rnn_worst <= 1e-6 and gru_worst <= 1e-6,
            f"rnn {rnn_worst:.2e}, gru {gru_worst:.2e}, {el:.1f}s")


def test_criterion_2_flow_identity():
    """One plain gradient step changes the state by the operator-predicted
    first-order flow, with error linear in the step size."""
    t0 = time.monotonic()
    model = RnnModel()
    params = rnn_init(10, 2, 1.1, seed=110, alpha=0.7)
    spec = TaskSpec("memory_pro", T_stim=5, T_mem=4, T_resp=4, noise_std=0.0)
    batch = gen_batch(spec, 4, seed=111)
    rng = np.random.default_rng(112)
    W_out = 0.4 * rng.standard_normal((2, 10))
    res = verify_flow(model, params, W_out, np.zeros(2), batch,
                      [1e-3, 5e-4, 2.5e-4, 1.25e-4, 1e-4])
    err_at_1e4 = res["rel_errs"][-1]
    slope_res = verify_flow(model, params, W_out, np.zeros(2), batch,
                            [1e-3, 5e-4, 2.5e-4, 1.25e-4])
    slope = slope_res["slope"]
    el = _budget(2, t0, 30.0)
    _report(2, err_at_1e4 <= 0.05 and 0.8 <= slope <= 1.2,
            f"rel err(1e-4) {err_at_1e4:.2e}, slope {slope:.3f}, {el:.1f}s")


def test_criterion_3_adjointness_and_psd():
    """Propagator adjoint probes and parameter-operator Rayleigh positivity."""
    t0 = time.monotonic()
    model = RnnModel()
    params = rnn_init(8, 2, 1.2, seed=120, alpha=0.8)
    x = np.random.default_rng(121).standard_normal((3, 12, 2))
    trace = model.forward(params, x)
    adj = ops.adjointness_residual(ops.make_p(trace), n_probes=100, seed=122)
    quot = ops.rayleigh_quotients(ops.make_k(trace), n_probes=100, seed=123)
    lam_max = float(quot.max())
    min_ok = float(quot.min()) >= -1e-10 * lam_max
    el = _budget(3, t0, 10.0)
    _report(3, adj <= 1e-10 and min_ok,
            f"adjointness {adj:.2e}, min quotient {quot.min():.2e}, {el:.1f}s")


def test_criterion_4_factorization_and_volterra():
    """Propagator factorization through the fundamental factors and the
    running-sum operator; analytic growth exponents; running-sum spectrum."""
    t0 = time.monotonic()
    model = RnnModel()
    params = rnn_init(8, 2, 0.5, seed=130, alpha=0.5)
    x = np.random.default_rng(131).standard_normal((3, 15, 2))
    trace = model.forward(params, x)
    fund = ops.make_fundamental(trace)
    q = np.random.default_rng(132).standard_normal(trace.z.shape)
    lhs = ops.make_p(trace)._apply(q)
    fact_err = float(np.linalg.norm(lhs - fund.factorization_apply(q))
                     / np.linalg.norm(lhs))

    a = np.array([0.8, 1.1, 0.6, 1.05])
    diag_fund = ops.make_fundamental(stub_trace(np.tile(np.diag(a), (1, 11, 1, 1))))
    sv_err = 0.0
    for t in range(12):
        expected = np.sort(np.abs(a) ** t)[::-1]
        sv_err = max(sv_err, float(np.max(np.abs(
            diag_fund.singular_values(0, t) - expected))))

    T = 200
    V = ops.make_volterra(T, dt=1.0 / T, inclusive=True)
    dense = np.linalg.svd(materialize(V), compute_uv=False)[:5]
    continuous = np.array([2.0 / ((2 * j - 1) * np.pi) for j in range(1, 6)])
    cont_err = float(np.max(np.abs(dense - continuous) / continuous))
    mf = top_svd(V, 5, seed=133, max_iter=250, want_functions=False)
    mf_err = float(np.max(np.abs(mf.singular_values[:5] - dense) / dense))
    el = _budget(4, t0, 20.0)
    _report(4, fact_err <= 1e-6 and sv_err <= 1e-12 and cont_err <= 0.02
            and mf_err <= 1e-8,
            f"factorization {fact_err:.2e}, diag sv {sv_err:.2e}, "
            f"volterra cont {cont_err:.3f} / dense {mf_err:.2e}, {el:.1f}s")


@pytest.mark.parametrize("r_x", [1, 2, 4])
def test_criterion_5_rank_bound(r_x):
    """Effective rank of the unit-consensus parameter operator is bounded by
    input rank + recurrent-activity dimension + 1 (bias slack)."""
    t0 = time.monotonic()
    H, I, B, T = 24, 6, 12, 40
    rng = np.random.default_rng(140 + r_x)
    basis, _ = np.linalg.qr(rng.standard_normal((I, r_x)))
    coeffs = rng.standard_normal((B, T, r_x))
    x = 0.7 * coeffs @ basis.T  # inputs of exact rank r_x
    model = RnnModel()
    params = rnn_init(H, I, 0.4, seed=141, alpha=1.0)
    trace = model.forward(params, x)
    sigma = Traj3(trace.caches["sigma"], trace.z.dt)
    r_z = effdim(sigma, 0.95)
    red = ops.average(ops.make_k(trace), ("unit",))
    summary = top_svd(red, k=min(B * T, 64), seed=142, want_functions=False)
    rank = summary.effective_ranks["sv"]
    bound = r_x + r_z + 1
    el = _budget(5, t0, 30.0)
    _report(5, rank <= bound,
            f"r_x={r_x}: effrank {rank} <= {bound} (r_z={r_z}), {el:.1f}s")


def test_criterion_6_rank_gap_at_initialization():
    """Consensus effective rank of the parameter operator is far below the
    propagator's at initialization, in every seed."""
    t0 = time.monotonic()
    results = []
    for seed in (0, 1, 2):
        params = rnn_init(64, 2, 1.0, seed=200 + seed, alpha=1.0)
        spec = TaskSpec("memory_pro", T_stim=30, T_mem=30, T_resp=30, noise_std=0.1)
        batch = gen_batch(spec, 30, seed=300 + seed)
        trace = RnnModel().forward(params, batch.inputs)
        k_red = ops.average(ops.make_k(trace), ("trial", "unit"))
        p_red = ops.average(ops.make_p(trace), ("trial", "unit"))
        rk = top_svd(k_red, 30, seed=seed, want_functions=False).effective_ranks["sv"]
        rp = top_svd(p_red, 30, seed=seed, want_functions=False).effective_ranks["sv_squared"]
        results.append((rk, rp, rk <= 0.3 * rp))
    el = _budget(6, t0, 300.0)
    _report(6, all(ok for _, _, ok in results),
            "; ".join(f"K {rk} vs P {rp}" for rk, rp, _ in results) + f", {el:.0f}s")


def test_criterion_9_lyapunov_correctness():
    """Analytic growth-exponent cases, Kaplan-Yorke formula cases, and the
    homogeneous-batch consensus identity."""
    t0 = time.monotonic()
    a = np.array([1.3, 0.9, 0.55])
    rep = lyapunov_spectrum(stub_trace(np.tile(np.diag(a), (2, 9, 1, 1))),
                            consensus=True)
    expected = np.sort(np.log(a))[::-1]
    diag_err = max(float(np.max(np.abs(rep.per_trial - expected))),
                   float(np.max(np.abs(rep.consensus - expected))))

    th = 0.7
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    rot = lyapunov_spectrum(stub_trace(np.tile(R, (2, 8, 1, 1))), consensus=True)
    rot_err = max(float(np.max(np.abs(rot.per_trial))),
                  float(np.max(np.abs(rot.consensus))))
    rot_ky_ok = np.all(rot.ky_per_trial == 2.0)

    ky_ok = (ky_dimension([0.5, -1.0]) == 1.5
             and ky_dimension([-0.2, -0.4]) == 0.0
             and ky_dimension([0.1, 0.05, -0.05]) == 3.0)

    model = RnnModel()
    rng = np.random.default_rng(150)
    H = 5
    p = RnnParams(W=np.diag(rng.uniform(0.6, 1.4, H)),
                  W_in=rng.standard_normal((H, 2)), b=np.zeros(H), alpha=0.6)
    x = np.tile(rng.standard_normal((1, 12, 2)), (4, 1, 1))
    hom = lyapunov_spectrum(model.forward(p, x), consensus=True)
    hom_err = float(np.max(np.abs(hom.consensus - hom.per_trial[0])))
    el = _budget(9, t0, 10.0)
    _report(9, diag_err <= 1e-10 and rot_err <= 1e-10 and rot_ky_ok and ky_ok
            and hom_err <= 1e-8,
            f"diag {diag_err:.1e}, rotation {rot_err:.1e}, homogeneous {hom_err:.1e}, "
            f"{el:.1f}s")


@pytest.mark.parametrize("H", [1, 4])
def test_criterion_10_hodgkin_huxley(H):
    """HH Jacobian actions vs finite differences, PSD parameter operator, and
    the analytic input/output-activity kernel."""
    t_start = time.monotonic()
    model = HhModel()
    params = hh_init(H, 2, seed=160 + H, dt_hh=0.01)
    rng = np.random.default_rng(161 + H)
    x = 0.5 * rng.standard_normal((2, 6, 2))
    trace = model.forward(params, x)
    eps = 1e-6
    worst = 0.0
    for t in (0, 2, 4):
        for b in range(2):
            v = rng.standard_normal(4 * H)
            v /= np.linalg.norm(v)

            def step(zt):
                return zt + params.dt_hh * model._field(params, zt[None, :],
                                                        x[b, t][None, :])[0]

            fd = (step(trace.z.data[b, t] + eps * v)
                  - step(trace.z.data[b, t] - eps * v)) / (2 * eps)
            an = model.jac_z_apply(trace, b, t, v)
            worst = max(worst, float(np.linalg.norm(fd - an) / np.linalg.norm(fd)))

    K = ops.make_k(trace)
    quot = ops.rayleigh_quotients(K, 100, seed=162)
    psd_ok = float(quot.min()) >= -1e-10 * max(float(quot.max()), 1e-300)

    # brute-force kernel comparison on the voltage block
    M = materialize(K)
    B, T, Hs = trace.z.shape
    sig = trace.caches["sigma"]

    def idx(b, t, h):
        return (b * T + t) * Hs + h

    expected = np.zeros_like(M)
    for b in range(B):
        for t in range(T - 1):
            for b0 in range(B):
                for t0 in range(T - 1):
                    kern = (x[b, t] @ x[b0, t0] + sig[b, t] @ sig[b0, t0])
                    kern *= params.dt_hh ** 2 / B
                    for h in range(H):
                        expected[idx(b, t, h), idx(b0, t0, h)] = kern
    kern_err = float(np.linalg.norm(M - expected) / np.linalg.norm(expected))
    el = _budget(10, t_start, 30.0)
    _report(10, worst <= 1e-5 and psd_ok and kern_err <= 1e-8,
            f"H={H}: jac fd {worst:.2e}, kernel {kern_err:.2e}, {el:.1f}s")


def test_criterion_7_experiment1_trend(tmp_path):
    """Desk-scale weight-scale sweep: convergence time does not increase with
    the initial scale, and the trained parameter-operator rank is similar
    across scales."""
    from gdflow.experiments import experiment1
    t_start = time.monotonic()
    rows = experiment1(str(tmp_path / "exp1"), g_list=(0.5, 1.5, 2.5),
                       seeds=(0, 1, 2), H=64)
    by_g = {}
    max_iters_seen = max(r["iterations"] for r in rows)
    for r in rows:
        conv = r["converged_at"] if r["converged_at"] is not None else max(
            r["iterations"], max_iters_seen)
        by_g.setdefault(r["g"], []).append(conv)
    medians = [float(np.median(by_g[g])) for g in (0.5, 1.5, 2.5)]
    monotone = medians[0] >= medians[1] >= medians[2]

    by_seed = {}
    for r in rows:
        by_seed.setdefault(r["seed"], []).append(r["effrank_k_after"])
    factor_ok = sum(1 for vals in by_seed.values()
                    if max(vals) <= 2 * max(min(vals), 1)) >= 2
    rank_gap_at_init = all(r["effrank_k_before"] < r["effrank_p_before"]
                           for r in rows)
    el = _budget(7, t_start, 7200.0)
    _report(7, monotone and factor_ok and rank_gap_at_init,
            f"medians {medians}, k_after per seed {dict(by_seed)}, "
            f"init rank gap {rank_gap_at_init}, {el:.0f}s")


def test_criterion_8_experiment2_trend(tmp_path):
    """Four-task interference: cumulative pro/anti alignment ends above
    mem/del, and the hidden-state alignment organizes the same way, in at
    least two of three seeds."""
    from gdflow.experiments import experiment2
    t_start = time.monotonic()
    summaries = experiment2(str(tmp_path / "exp2"), seeds=(0, 1, 2), H=64)
    good = 0
    details = []
    for s in summaries:
        intf_ok = (s["final_cum_intf_pro_anti"] is not None
                   and s["final_cum_intf_mem_del"] is not None
                   and s["final_cum_intf_pro_anti"] > s["final_cum_intf_mem_del"])
        hidden_ok = (s["final_hidden_pro_anti"] is not None
                     and s["final_hidden_mem_del"] is not None
                     and s["final_hidden_pro_anti"] > s["final_hidden_mem_del"])
        good += int(intf_ok and hidden_ok)
        details.append(f"seed {s['seed']}: intf {s['final_cum_intf_pro_anti']:.3f}"
                       f"/{s['final_cum_intf_mem_del']:.3f} "
                       f"hidden {s['final_hidden_pro_anti']:.3f}"
                       f"/{s['final_hidden_mem_del']:.3f}")
    el = _budget(8, t_start, 7200.0)
    _report(8, good >= 2, "; ".join(details) + f", {el:.0f}s")


def test_criterion_11_determinism(tmp_path):
    """Re-running any command with the same seed yields byte-identical
    output files."""
    import json as _json
    import os as _os
    from gdflow.cli import main as cli_main
    t_start = time.monotonic()
    cfg = {
        "run_id": "det", "seed": 5,
        "model": {"kind": "rnn", "H": 6, "g": 1.0},
        "task": {"kind": "memory_pro", "T_stim": 4, "T_mem": 4, "T_resp": 4,
                 "noise_std": 0.1},
        "train": {"batch_size": 8, "max_iters": 15, "eval_every": 5,
                  "pool_size": 20, "eval_size": 4,
                  "convergence_loss_threshold": 1e-9},
        "analysis": {"spectra_every": 10, "spectra_k": 5},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(_json.dumps(cfg))

    def run_all(root):
        cli_main(["train", "--config", str(cfg_path), "--out", str(root / "train")])
        cli_main(["spectra", "--config", str(cfg_path),
                  "--params", str(root / "train" / "params_final"),
                  "--out", str(root / "spec"), "--operator", "k", "--k", "4"])
        from gdflow.experiments import experiment1, experiment2_single
        experiment1(str(root / "exp1"), g_list=(1.0,), seeds=(0,), H=6,
                    max_iters=20, batch_size=8, baseline_max_iters=15)
        experiment2_single(str(root / "exp2"), seed=0, H=6, max_iters=30,
                           snapshot_every=15, batch_size=8, B_per_task=3,
                           pool_per_task=6)

    r1, r2 = tmp_path / "r1", tmp_path / "r2"
    run_all(r1)
    run_all(r2)
    mismatched = []
    for dirpath, _, files in _os.walk(r1):
        rel = _os.path.relpath(dirpath, r1)
        for f in files:
            a = _os.path.join(dirpath, f)
            b = _os.path.join(r2, rel, f)
            if open(a, "rb").read() != open(b, "rb").read():
                mismatched.append(_os.path.join(rel, f))
    el = _budget(11, t_start, 600.0)
    _report(11, not mismatched, f"{len(mismatched)} mismatched files "
            f"{mismatched[:4]}, {el:.0f}s")
