"""Machinery tests for the experiment drivers, at toy scale (the full-size
trend assertions live in the acceptance suite)."""

import json
import os

import numpy as np

from gdflow.experiments import experiment1, experiment2_single


def test_experiment1_toy_scale(tmp_path):
    out = str(tmp_path / "exp1")
    rows = experiment1(out, g_list=(0.5, 1.5), seeds=(0,), H=8, max_iters=40,
                       batch_size=16, baseline_max_iters=30)
    assert len(rows) == 2
    summary = (tmp_path / "exp1" / "summary.csv").read_text().strip().split("\n")
    assert summary[0].startswith("seed,g,threshold,converged_at")
    assert len(summary) == 3
    for row in rows:
        assert row["effrank_k_before"] >= 1
        assert row["effrank_p_before"] >= 1
        assert os.path.isdir(os.path.join(out, f"seed0_g{row['g']:g}"))
    base = json.loads((tmp_path / "exp1" / "baseline_seed0.json").read_text())
    assert base["role"] == "baseline"
    assert rows[0]["threshold"] == 0.05 * base["final_eval_loss"]


def test_experiment1_deterministic(tmp_path):
    r1 = experiment1(str(tmp_path / "a"), g_list=(1.0,), seeds=(0,), H=6,
                     max_iters=25, batch_size=8, baseline_max_iters=20)
    r2 = experiment1(str(tmp_path / "b"), g_list=(1.0,), seeds=(0,), H=6,
                     max_iters=25, batch_size=8, baseline_max_iters=20)
    assert r1 == r2
    a = (tmp_path / "a" / "summary.csv").read_bytes()
    b = (tmp_path / "b" / "summary.csv").read_bytes()
    assert a == b


def test_experiment2_toy_scale(tmp_path):
    out = str(tmp_path / "exp2")
    summary = experiment2_single(out, seed=0, H=8, max_iters=60,
                                 snapshot_every=20, batch_size=16,
                                 B_per_task=4, pool_per_task=12)
    run = tmp_path / "exp2" / "seed0"
    assert (run / "curves.csv").exists()
    assert (run / "alignment.json").exists()
    assert (run / "summary.json").exists()
    recs = json.loads((run / "alignment.json").read_text())
    assert [r["iteration"] for r in recs] == [0, 20, 40, 60]
    for r in recs:
        A = np.asarray(r["alignment"])
        assert np.allclose(np.diag(A), 1.0)
        assert np.all(np.abs(A) <= 1.0 + 1e-10)
        M = r["interference"]
        for i in range(4):
            assert M[i][i] == 1.0
            for j in range(4):
                if M[i][j] is not None:
                    assert -1.0 - 1e-10 <= M[i][j] <= 1.0 + 1e-10
    assert -1.0 <= summary["final_cum_intf_pro_anti"] <= 1.0
    header = (run / "curves.csv").read_text().split("\n")[0]
    assert header == ("iter,hidden_pro_anti,hidden_mem_del,intf_pro_anti,"
                      "intf_mem_del,cum_intf_pro_anti,cum_intf_mem_del")
