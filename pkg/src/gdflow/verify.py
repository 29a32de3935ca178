"""Machine-checkable invariant battery behind the `verify` command.

Each check returns its measured value and the tolerance it was held to; the
report is emitted as JSON so downstream tooling can track tolerances over
time. A deliberately corrupted Jacobian (test fixture) must make the gradient
check fail, which is itself exercised in the test suite.
"""

from __future__ import annotations

import numpy as np

from . import operators as ops
from . import trajspace as ts
from .models import RnnModel, rnn_init
from .models.base import ForwardTrace
from .spectral import top_svd
from .tasks import TaskSpec, gen_batch
from .training import TrainConfig, adjoint_backward, loss_and_err, train_on_task


def _small_instance(seed=0, H=8, T=12, B=3, g=1.0, alpha=0.7, corrupt=None):
    model = RnnModel()
    if corrupt == "jacobian":
        class _Broken(RnnModel):
            def jac_tapply_all(self, trace, t, V, trial_slice=None):
                out = super().jac_tapply_all(trace, t, V, trial_slice)
                return out * 1.01  # corrupted transpose action (test fixture)
        model = _Broken()
    params = rnn_init(H, 2, g, seed=seed, alpha=alpha)
    rng = np.random.default_rng(seed + 1)
    x = rng.standard_normal((B, T, 2))
    trace = model.forward(params, x)
    W_out = 0.4 * rng.standard_normal((2, H))
    b_out = np.zeros(2)
    batch = gen_batch(TaskSpec("memory_pro", T_stim=T // 3, T_mem=T // 3,
                               T_resp=T - 2 * (T // 3), noise_std=0.05), B, seed + 2)
    return model, params, trace, W_out, b_out, batch


def check_inner_product(seed=0):
    rng = np.random.default_rng(seed)
    q = ts.Traj3(rng.standard_normal((3, 5, 4)))
    r = ts.Traj3(rng.standard_normal((3, 5, 4)))
    sym = abs(ts.inner(q, r) - ts.inner(r, q))
    a, b = rng.standard_normal(2)
    lin = abs(ts.inner(ts.Traj3(a * q.data + b * r.data), r)
              - (a * ts.inner(q, r) + b * ts.inner(r, r)))
    scale = abs(ts.inner(q, r)) + ts.norm(q) * ts.norm(r)
    measured = max(sym, lin) / scale
    return measured, 1e-12


def check_propagator_adjointness(seed=0, n_probes=100):
    _, _, trace, _, _, _ = _small_instance(seed)
    return ops.adjointness_residual(ops.make_p(trace), n_probes, seed), 1e-10


def check_parameter_operator_psd(seed=0, n_probes=100):
    _, _, trace, _, _, _ = _small_instance(seed)
    quot = ops.rayleigh_quotients(ops.make_k(trace), n_probes, seed)
    lam_max = float(quot.max())
    measured = max(0.0, -float(quot.min())) / max(lam_max, 1e-300)
    return measured, 1e-10


def check_gradient_finite_difference(seed=0, corrupt=None):
    model, params, trace, W_out, b_out, batch = _small_instance(seed, corrupt=corrupt)
    trace = model.forward(params, batch.inputs)
    loss, err = loss_and_err(trace, W_out, b_out, batch)
    _, grad, _, _ = adjoint_backward(trace, err, W_out, b_out, batch)
    vec = model.params_to_vector(params)
    rng = np.random.default_rng(seed + 3)
    eps = 1e-6
    worst = 0.0
    for _ in range(10):
        d = rng.standard_normal(vec.size)
        d /= np.linalg.norm(d)
        f = lambda v: loss_and_err(model.forward(model.vector_to_params(params, v),
                                                 batch.inputs), W_out, b_out, batch)[0]
        fd = (f(vec + eps * d) - f(vec - eps * d)) / (2 * eps)
        an = float(grad @ d)
        worst = max(worst, abs(fd - an) / max(abs(fd), 1e-300))
    return worst, 1e-6


def _volterra_values(T=200):
    V = ops.make_volterra(T, dt=1.0 / T, inclusive=True)
    M = np.zeros((T, T))
    e = np.zeros((1, T, 1))
    for j in range(T):
        e[:] = 0.0
        e[0, j, 0] = 1.0
        M[:, j] = V._apply(e)[0, :, 0]
    dense = np.linalg.svd(M, compute_uv=False)[:5]
    summary = top_svd(V, 5, seed=0, max_iter=250, want_functions=False)
    return dense, summary.singular_values[:5]


def check_volterra_vs_continuous(T=200):
    dense, _ = _volterra_values(T)
    continuous = np.array([2.0 / ((2 * j - 1) * np.pi) for j in range(1, 6)])
    return float(np.max(np.abs(dense - continuous) / continuous)), 0.02


def check_volterra_vs_dense(T=200):
    dense, matfree = _volterra_values(T)
    return float(np.max(np.abs(matfree - dense) / dense)), 1e-8


def check_factorization(seed=0):
    model, params, trace, _, _, _ = _small_instance(seed, H=6, T=12, g=0.5, alpha=0.5)
    fund = ops.make_fundamental(trace)
    rng = np.random.default_rng(seed + 4)
    q = rng.standard_normal(trace.z.shape)
    lhs = ops.make_p(trace)._apply(q)
    rhs = fund.factorization_apply(q)
    return float(np.linalg.norm(lhs - rhs) / np.linalg.norm(lhs)), 1e-6


def check_lyapunov_analytic(seed=0):
    from .analysis import lyapunov_spectrum

    class _Stub:
        def jac_matrices(self, trace, t):
            return trace.caches["J"][:, t]

    a = np.array([1.2, 0.9, 0.6])
    B, T, H = 2, 9, 3
    J = np.tile(np.diag(a), (B, T - 1, 1, 1))
    trace = ForwardTrace(model=_Stub(), params=None, inputs=np.zeros((B, T, 1)),
                         z=ts.Traj3(np.zeros((B, T, H))), caches={"J": J})
    rep = lyapunov_spectrum(trace, consensus=True)
    expected = np.sort(np.log(a))[::-1]
    meas = max(float(np.max(np.abs(rep.per_trial - expected))),
               float(np.max(np.abs(rep.consensus - expected))))
    return meas, 1e-10


def check_svd_against_dense(seed=0):
    _, _, trace, _, _, _ = _small_instance(seed, H=4, T=10, B=3)  # 120 dims
    p_op = ops.make_p(trace)
    n = p_op.n_in
    M = np.zeros((n, n))
    e = np.zeros(n)
    for j in range(n):
        e[:] = 0.0
        e[j] = 1.0
        M[:, j] = p_op.apply_flat(e)
    dense = np.linalg.svd(M, compute_uv=False)
    summary = top_svd(p_op, 6, seed=seed, max_iter=200, want_functions=False)
    meas = float(np.max(np.abs(summary.singular_values[:6] - dense[:6]) / dense[:6]))
    return meas, 1e-8


def check_determinism(seed=0):
    model = RnnModel()
    spec = TaskSpec("memory_pro", T_stim=5, T_mem=5, T_resp=5, noise_std=0.1)
    cfg = TrainConfig(batch_size=8, max_iters=20, eval_every=10, seed=seed,
                      pool_size=40, eval_size=5, convergence_loss_threshold=1e-12)
    outs = []
    for _ in range(2):
        params = rnn_init(6, 2, 1.0, seed=seed)
        rng = np.random.default_rng(seed + 5)
        W_out = rng.standard_normal((2, 6)) * 0.3
        rec = train_on_task(model, params, W_out, np.zeros(2), spec, cfg)
        outs.append(rec.losses.tobytes())
    return (0.0 if outs[0] == outs[1] else 1.0), 0.5


CHECKS = [
    ("inner_product_symmetry_bilinearity", check_inner_product),
    ("propagator_adjointness", check_propagator_adjointness),
    ("parameter_operator_psd", check_parameter_operator_psd),
    ("gradient_vs_finite_differences", check_gradient_finite_difference),
    ("volterra_vs_continuous_spectrum", check_volterra_vs_continuous),
    ("volterra_vs_dense_oracle", check_volterra_vs_dense),
    ("fundamental_factorization", check_factorization),
    ("lyapunov_analytic_cases", check_lyapunov_analytic),
    ("matrix_free_svd_vs_dense", check_svd_against_dense),
    ("seeded_determinism", check_determinism),
]


def run_verification(corrupt: str | None = None) -> dict:
    """Run every invariant check; `corrupt` injects a known defect (used by
    the tests to prove the battery actually bites)."""
    checks = []
    all_passed = True
    for name, fn in CHECKS:
        if name == "gradient_vs_finite_differences":
            measured, tol = fn(corrupt=corrupt)
        else:
            measured, tol = fn()
        passed = bool(measured <= tol)
        all_passed &= passed
        checks.append({"name": name, "passed": passed,
                       "measured": float(measured), "tolerance": float(tol)})
    return {"checks": checks, "all_passed": bool(all_passed)}
