import numpy as np
import pytest

from gdflow import operators as ops
from gdflow.models import RnnModel, rnn_init
from gdflow.trajspace import Traj3, inner

from helpers import materialize, stub_trace


@pytest.fixture
def rnn_trace():
    model = RnnModel()
    params = rnn_init(6, 2, 1.1, seed=0, alpha=0.7)
    x = np.random.default_rng(1).standard_normal((3, 9, 2))
    return model.forward(params, x)


# -- propagator -------------------------------------------------------------

def test_p_zero_jacobian_is_shift():
    # J = 0: output at t+1 is exactly the input at slot t
    B, T, H = 2, 6, 3
    J = np.zeros((B, T - 1, H, H))
    tr = stub_trace(J)
    q = np.random.default_rng(0).standard_normal((B, T, H))
    p = ops.make_p(tr)._apply(q)
    assert np.all(p[:, 0] == 0.0)
    for t in range(T - 1):
        assert np.array_equal(p[:, t + 1], q[:, t])


def test_p_identity_jacobian_is_exclusive_cumsum():
    B, T, H = 2, 7, 3
    J = np.tile(np.eye(H), (B, T - 1, 1, 1))
    tr = stub_trace(J)
    q = np.random.default_rng(1).standard_normal((B, T, H))
    p = ops.make_p(tr)._apply(q)
    expected = ops.make_volterra(T, dt=1.0, inclusive=False, B=B, H=H)._apply(q)
    assert np.allclose(p, expected, rtol=1e-14)


def test_p_adjoint_zero_jacobian_reverse_shift():
    B, T, H = 2, 5, 3
    tr = stub_trace(np.zeros((B, T - 1, H, H)))
    q = np.random.default_rng(2).standard_normal((B, T, H))
    a = ops.make_p_adjoint(tr)._apply(q)
    assert np.all(a[:, T - 1] == 0.0)
    for t in range(T - 1):
        assert np.array_equal(a[:, t], q[:, t + 1])


def test_p_adjointness_probe(rnn_trace):
    assert ops.adjointness_residual(ops.make_p(rnn_trace), 100, seed=0) < 1e-10


def test_p_linearity(rnn_trace):
    assert ops.linearity_residual(ops.make_p(rnn_trace), 8, seed=1) < 1e-10


def test_p_block_diagonal_over_trials(rnn_trace):
    P = ops.make_p(rnn_trace)
    q = np.zeros(rnn_trace.z.shape)
    q[1] = np.random.default_rng(3).standard_normal(q.shape[1:])
    out = P._apply(q)
    assert np.all(out[0] == 0.0) and np.all(out[2] == 0.0)  # exact zeros


def test_p_direct_mode_agrees(rnn_trace):
    P = ops.make_p(rnn_trace)
    Pd = ops.make_p(rnn_trace, mode="direct")
    assert Pd.exact_linear is False
    rng = np.random.default_rng(4)
    q = rng.standard_normal(rnn_trace.z.shape)
    q *= 1e-5 / np.linalg.norm(q)
    lin = P._apply(q)
    direct = Pd._apply(q)
    assert np.linalg.norm(direct - lin) / np.linalg.norm(lin) < 1e-4


# -- parameter operator ------------------------------------------------------

def test_k_zero_input(rnn_trace):
    K = ops.make_k(rnn_trace)
    assert np.all(K._apply(np.zeros(rnn_trace.z.shape)) == 0.0)


def test_k_scalar_single_transition():
    # B=1, T=2, H=1, I=1, alpha=1 with bias trained: K q = (s^2 + x^2 + 1) q
    from gdflow.models import RnnParams
    model = RnnModel()
    z0, x0 = 0.6, 0.5
    p = RnnParams(W=np.array([[0.4]]), W_in=np.array([[0.7]]), b=np.array([0.2]),
                  alpha=1.0)
    tr = model.forward(p, np.array([[[x0], [0.0]]]), z0=np.array([z0]))
    K = ops.make_k(tr)
    q = np.zeros((1, 2, 1))
    q[0, 0, 0] = 2.0
    out = K._apply(q)
    s = np.tanh(z0)
    assert out[0, 0, 0] == pytest.approx((s * s + x0 * x0 + 1.0) * 2.0, rel=1e-14)
    assert out[0, 1, 0] == 0.0


def test_k_psd_probe(rnn_trace):
    quot = ops.rayleigh_quotients(ops.make_k(rnn_trace), 100, seed=5)
    assert quot.min() >= -1e-10 * quot.max()


def test_k_self_adjoint(rnn_trace):
    K = ops.make_k(rnn_trace)
    assert K.self_adjoint
    assert ops.adjointness_residual(K, 50, seed=6) < 1e-10


def test_k_trial_permutation_equivariance():
    # equality holds up to reduction reordering (floating sums regroup when
    # trials permute); the mathematical map is exactly equivariant
    model = RnnModel()
    params = rnn_init(5, 2, 1.0, seed=2, alpha=0.8)
    rng = np.random.default_rng(7)
    x = rng.standard_normal((4, 6, 2))
    perm = np.array([2, 0, 3, 1])
    tr = model.forward(params, x)
    tr_p = model.forward(params, x[perm])
    q = rng.standard_normal((4, 6, 5))
    out = ops.make_k(tr)._apply(q)
    out_p = ops.make_k(tr_p)._apply(q[perm])
    assert np.linalg.norm(out_p - out[perm]) <= 1e-13 * np.linalg.norm(out)


def test_k_additivity_over_weight_blocks():
    """Freezing all but one parameter block and summing the per-block
    operators reproduces the full operator (the kernel is a sum over
    weights)."""
    model = RnnModel()
    params = rnn_init(4, 2, 1.0, seed=3, alpha=1.0)
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 5, 2))
    tr = model.forward(params, x)
    q = rng.standard_normal((2, 5, 4))
    full = ops.make_k(tr)._apply(q)

    n = model.n_params(params)
    nW = params.W.size
    nWin = params.W_in.size
    blocks = [np.arange(0, nW), np.arange(nW, nW + nWin), np.arange(nW + nWin, n)]
    partial = np.zeros_like(full)
    for idx in blocks:
        theta = model.param_vjp(tr, q)
        masked = np.zeros(n)
        masked[idx] = theta[idx]
        partial += model.param_jvp(tr, masked).data
    assert np.linalg.norm(partial - full) / np.linalg.norm(full) < 1e-12


# -- compositions ------------------------------------------------------------

def test_pkp_matches_explicit_composition(rnn_trace):
    P = ops.make_p(rnn_trace)
    Ps = ops.make_p_adjoint(rnn_trace)
    K = ops.make_k(rnn_trace)
    PKP = ops.make_pkp(rnn_trace)
    q = np.random.default_rng(9).standard_normal(rnn_trace.z.shape)
    seq = P._apply(K._apply(Ps._apply(q)))
    assert np.array_equal(PKP._apply(q), seq)  # bit-identical


def test_pkp_self_adjoint_psd(rnn_trace):
    PKP = ops.make_pkp(rnn_trace)
    assert ops.adjointness_residual(PKP, 50, seed=10) < 1e-10
    assert ops.rayleigh_quotients(PKP, 100, seed=11).min() >= -1e-10 * \
        ops.rayleigh_quotients(PKP, 100, seed=11).max()


def test_ppstar_psd_and_volterra_case():
    # J = I makes P P* = V V^T with the exclusive running-sum matrix
    B, T, H = 1, 12, 1
    tr = stub_trace(np.tile(np.eye(H), (B, T - 1, 1, 1)))
    PP = ops.make_ppstar(tr)
    quot = ops.rayleigh_quotients(PP, 100, seed=12)
    assert quot.min() >= -1e-10 * quot.max()
    M = materialize(PP)
    Vm = materialize(ops.make_volterra(T, 1.0, inclusive=False, B=B, H=H))
    assert np.linalg.norm(M - Vm @ Vm.T) / np.linalg.norm(M) < 1e-12
    top_dense = np.linalg.svd(Vm, compute_uv=False)[0] ** 2
    assert np.linalg.svd(M, compute_uv=False)[0] == pytest.approx(top_dense, rel=1e-8)


# -- trial blocks ------------------------------------------------------------

def test_restrict_blocks_validation(rnn_trace):
    K = ops.make_k(rnn_trace)
    P = ops.make_p(rnn_trace)
    with pytest.raises(ValueError):
        ops.restrict_blocks(K, P, [[0, 1], [1, 2]])
    with pytest.raises(ValueError):
        ops.restrict_blocks(K, P, [[0], [2]])


def test_block_k_linearity(rnn_trace):
    K = ops.make_k(rnn_trace)
    P = ops.make_p(rnn_trace)
    blocks = ops.restrict_blocks(K, P, [[0], [1, 2]])
    rng = np.random.default_rng(13)
    q = rng.standard_normal(rnn_trace.z.shape)
    full = K._apply(q)
    for i in range(2):
        total = sum(blocks.k_block(i, j)._apply(q[blocks.partition[j]])
                    for j in range(2))
        assert np.linalg.norm(total - full[blocks.partition[i]]) \
            / np.linalg.norm(full[blocks.partition[i]]) < 1e-12


def test_block_k_orthogonal_inputs_decouple():
    """Input-weights-only linear model with disjoint input supports: the
    cross-task kernel x_i . x_j vanishes, so K_12 = 0."""
    from gdflow.models import RnnParams
    model = RnnModel()
    H, I = 3, 4
    p = RnnParams(W=np.zeros((H, H)), W_in=np.zeros((H, I)), b=np.zeros(H), alpha=1.0)
    rng = np.random.default_rng(14)
    x = np.zeros((4, 6, I))
    x[:2, :, :2] = rng.standard_normal((2, 6, 2))   # task 1 uses channels 0:2
    x[2:, :, 2:] = rng.standard_normal((2, 6, 2))   # task 2 uses channels 2:4
    tr = model.forward(p, x)

    # restrict the kernel to the input-weight block: zero the W and b parts
    nW = H * H
    nWin = H * I

    def k_input_only(q):
        theta = model.param_vjp(tr, q)
        masked = np.zeros_like(theta)
        masked[nW:nW + nWin] = theta[nW:nW + nWin]
        return model.param_jvp(tr, masked).data

    K = ops.OperatorHandle(_apply=k_input_only, _adjoint_apply=k_input_only,
                           shape_in=tr.z.shape, shape_out=tr.z.shape,
                           self_adjoint=True, psd=True)
    P = ops.make_p(tr)
    blocks = ops.restrict_blocks(K, P, [[0, 1], [2, 3]])
    q = rng.standard_normal((2, 6, H))
    cross = blocks.k_block(0, 1)._apply(q)
    assert np.linalg.norm(cross) < 1e-8


def test_block_p_structure(rnn_trace):
    P = ops.make_p(rnn_trace)
    K = ops.make_k(rnn_trace)
    blocks = ops.restrict_blocks(K, P, [[0, 2], [1]])
    q = np.random.default_rng(15).standard_normal((2, 9, 6))
    out = blocks.p_block(0)._apply(q)
    full = P._apply(ops.embed_trials(q, np.array([0, 2]), 3))
    assert np.array_equal(out, full[[0, 2]])


# -- fundamental / running-sum factorization ---------------------------------

def test_fundamental_diag_powers():
    a = np.array([0.9, 1.2])
    B, T, H = 1, 6, 2
    J = np.tile(np.diag(a), (B, T - 1, 1, 1))
    fund = ops.make_fundamental(stub_trace(J))
    for t in range(T):
        sv = fund.singular_values(0, t)
        expected = np.sort(np.abs(a) ** t)[::-1]
        assert np.allclose(sv, expected, rtol=1e-12)


def test_fundamental_constant_scalar():
    c = 1.07
    J = np.tile(c * np.eye(3), (2, 5, 1, 1))
    fund = ops.make_fundamental(stub_trace(J))
    for t in range(6):
        assert np.allclose(fund.U[0, t], c ** t * np.eye(3), rtol=1e-12)


def test_factorization_reproduces_propagator():
    model = RnnModel()
    params = rnn_init(6, 2, 0.5, seed=4, alpha=0.5)
    rng = np.random.default_rng(16)
    x = rng.standard_normal((2, 12, 2))
    tr = model.forward(params, x)
    fund = ops.make_fundamental(tr)
    q = rng.standard_normal(tr.z.shape)
    lhs = ops.make_p(tr)._apply(q)
    rhs = fund.factorization_apply(q)
    assert np.linalg.norm(lhs - rhs) / np.linalg.norm(lhs) < 1e-6


def test_qr_chain_matches_plain_product():
    model = RnnModel()
    params = rnn_init(5, 2, 0.6, seed=5, alpha=0.5)
    x = np.random.default_rng(17).standard_normal((2, 14, 2))
    tr = model.forward(params, x)
    plain = ops.make_fundamental(tr, qr_stabilized=False)
    qr = ops.make_fundamental(tr, qr_stabilized=True)
    assert np.linalg.norm(qr.U - plain.U) / np.linalg.norm(plain.U) < 1e-10


def test_fundamental_singular_jacobian_rejected():
    J = np.tile(np.eye(3), (1, 4, 1, 1))
    J[0, 2] = 0.0
    with pytest.raises(ops.SingularJacobianError):
        ops.make_fundamental(stub_trace(J))


def test_fundamental_condition_guard():
    J = np.tile(np.diag([1e3, 1e-3]), (1, 8, 1, 1))  # cond(U) reaches 1e48
    fund = ops.make_fundamental(stub_trace(J))
    with pytest.raises(ops.SingularJacobianError):
        fund.inverse_apply(np.ones((1, 9, 2)))


# -- running-sum operator ------------------------------------------------------

def test_volterra_inclusive_values():
    V = ops.make_volterra(5, dt=1.0, inclusive=True)
    q = np.ones((1, 5, 1))
    out = V._apply(q)
    assert np.array_equal(out[0, :, 0], [1, 2, 3, 4, 5])


def test_volterra_spectrum_continuous_and_dense():
    T = 200
    V = ops.make_volterra(T, dt=1.0 / T, inclusive=True)
    M = materialize(V)
    dense = np.linalg.svd(M, compute_uv=False)[:5]
    continuous = np.array([2.0 / ((2 * j - 1) * np.pi) for j in range(1, 6)])
    assert np.max(np.abs(dense - continuous) / continuous) < 0.02


def test_volterra_not_self_adjoint():
    V = ops.make_volterra(6, dt=1.0, inclusive=True)
    M = materialize(V)
    assert np.linalg.norm(M - M.T) > 0.0
    assert ops.adjointness_residual(V, 20, seed=18) < 1e-12


# -- consensus reduction -------------------------------------------------------

def test_average_identity():
    shape = (3, 4, 5)
    ident = ops.OperatorHandle(_apply=lambda q: q.copy(), _adjoint_apply=lambda q: q.copy(),
                               shape_in=shape, shape_out=shape, self_adjoint=True, psd=True)
    red = ops.average(ident, ("trial", "time"))
    assert red.shape_in == (5,)
    assert np.allclose(red.matrix, np.eye(5), atol=1e-14)
    red2 = ops.average(ident, ("unit",))
    assert red2.shape_in == (3, 4)
    assert np.allclose(red2.matrix, np.eye(12), atol=1e-14)


def test_average_scalar_multiple():
    shape = (2, 3, 4)
    c = -2.5
    op = ops.OperatorHandle(_apply=lambda q: c * q, _adjoint_apply=lambda q: c * q,
                            shape_in=shape, shape_out=shape, self_adjoint=True)
    red = ops.average(op, ("time",))
    assert np.allclose(red.matrix, c * np.eye(8), atol=1e-14)


def test_average_k_matches_brute_force_kernel_gram():
    """Consensus of the parameter operator over trials and times equals the
    double-averaged analytic kernel, assembled by brute force."""
    model = RnnModel()
    params = rnn_init(2, 2, 1.0, seed=6, alpha=1.0)
    rng = np.random.default_rng(19)
    x = rng.standard_normal((2, 3, 2))
    tr = model.forward(params, x)
    K = ops.make_k(tr)
    red = ops.average(K, ("trial", "time"))
    B, T, H = tr.z.shape
    sig = tr.caches["sigma"]
    expected = np.zeros((H, H))
    # kernel is (sigma.sigma0 + x.x0 + 1) * I_H on transition slots
    for b in range(B):
        for t in range(T - 1):
            for b0 in range(B):
                for t0 in range(T - 1):
                    kern = sig[b, t] @ sig[b0, t0] + x[b, t] @ x[b0, t0] + 1.0
                    expected += kern / B * np.eye(H)
    expected /= B * T  # output average over trials and times
    ev_red = np.sort(np.linalg.eigvalsh(red.matrix))
    ev_exp = np.sort(np.linalg.eigvalsh(expected))
    assert np.allclose(ev_red, ev_exp, rtol=1e-8)


def test_average_preserves_self_adjointness(rnn_trace):
    red = ops.average(ops.make_k(rnn_trace), ("trial",))
    assert red.self_adjoint
    assert np.allclose(red.matrix, red.matrix.T, atol=1e-12)
    M = materialize(red)
    assert np.allclose(M, red.matrix, atol=1e-14)


def test_operator_handles_traj3_io(rnn_trace):
    P = ops.make_p(rnn_trace)
    q = Traj3(np.random.default_rng(20).standard_normal(rnn_trace.z.shape),
              rnn_trace.z.dt)
    out = P.apply(q)
    assert isinstance(out, Traj3)
    lhs = inner(out, q)
    rhs = inner(q, P.adjoint_apply(q))
    assert lhs == pytest.approx(rhs, rel=1e-10)
