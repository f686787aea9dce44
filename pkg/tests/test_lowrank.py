import numpy as np
import pytest
from scipy import sparse

from redistopt import lowrank as lr
from redistopt.lowrank import FactoredMatrix, FWParams, ObservedMatrix
from redistopt.regularizers import KappaSpec, bar_spectral, kappa_derivative, kappa_value

LSP = KappaSpec("lsp", 1.0, 1.0)


def orth(rng, m, k):
    return np.linalg.qr(rng.standard_normal((m, k)))[0]


def random_factor(rng, m, n, k, diag=False):
    if diag:
        B = np.diag(rng.uniform(0.5, 3.0, k))
    else:
        C = rng.standard_normal((k, k))
        B = C @ C.T + 0.1 * np.eye(k)
    return FactoredMatrix(orth(rng, m, k), B, orth(rng, n, k))


def full_obs(O):
    m, n = O.shape
    r, c = np.divmod(np.arange(m * n), n)
    return ObservedMatrix((m, n), r, c, O.ravel())


def fbar_dense(X, data, spec, mu):
    """Loss plus the concave spectral remainder, from a dense SVD."""
    R = X[data.rows, data.cols] - data.values
    return 0.5 * float(R @ R) + bar_spectral(spec, np.linalg.svd(X, compute_uv=False), mu)[0]


# ----------------------------------------------------------------- types

def test_factor_invariants_and_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    x = random_factor(rng, 6, 5, 2)
    x.check()
    np.testing.assert_allclose(np.sort(x.singular_values()), np.sort(np.linalg.svd(x.dense())[1][:2]))
    path = tmp_path / "f.npz"
    x.save(path)
    y = FactoredMatrix.load(path)
    np.testing.assert_array_equal(y.dense(), x.dense())
    with pytest.raises(ValueError):
        FactoredMatrix(x.U, np.eye(3), x.V)
    with pytest.raises(ValueError):
        FactoredMatrix(x.U, -np.eye(2), x.V).check()
    assert lr.factor_sqdist(x, FactoredMatrix.zeros(6, 5)) == pytest.approx(np.sum(x.dense() ** 2))


def test_observed_matrix_validation():
    d = ObservedMatrix((3, 3), [2, 0, 0], [1, 2, 0], [1.0, 2.0, 3.0])
    assert list(zip(d.rows, d.cols)) == [(0, 0), (0, 2), (2, 1)]
    np.testing.assert_array_equal(d.values, [3.0, 2.0, 1.0])
    with pytest.raises(ValueError):
        ObservedMatrix((3, 3), [0, 0], [1, 1], [1.0, 2.0])
    with pytest.raises(ValueError):
        ObservedMatrix((3, 3), [3], [0], [1.0])


# ------------------------------------------------------------ completion loss

def test_completion_loss_examples():
    rng = np.random.default_rng(1)
    x = random_factor(rng, 4, 3, 2)
    X = x.dense()
    d = full_obs(X)
    v, R = lr.completion_loss(x, d)
    assert v == pytest.approx(0.0, abs=1e-24) and abs(R).max() < 1e-14
    one = FactoredMatrix(np.eye(2)[:, :1], [[2.0]], np.eye(2)[:, :1])
    v, R = lr.completion_loss(one, ObservedMatrix((2, 2), [0], [0], [5.0]))
    assert v == pytest.approx(4.5)
    assert sparse.issparse(R) and R.nnz == 1 and R[0, 0] == pytest.approx(-3.0)
    with pytest.raises(ValueError):
        lr.completion_loss(one, ObservedMatrix((3, 2), [0], [0], [5.0]))


def test_completion_gradient_fd_through_factor():
    rng = np.random.default_rng(2)
    m, n = 12, 9
    idx = rng.permutation(m * n)[:30]
    data = ObservedMatrix((m, n), idx // n, idx % n, rng.standard_normal(30))
    x = random_factor(rng, m, n, 3)
    _, R = lr.completion_loss(x, data)
    for _ in range(5):
        E = rng.standard_normal((3, 3))
        h = 1e-6
        up = lr.completion_loss(FactoredMatrix(x.U, x.B + h * E, x.V), data)[0]
        dn = lr.completion_loss(FactoredMatrix(x.U, x.B - h * E, x.V), data)[0]
        fd = (up - dn) / (2 * h)
        an = float(np.sum((x.U.T @ (R @ x.V)) * E))
        assert abs(fd - an) <= 1e-5 * max(1.0, abs(an))


# ---------------------------------------------------------------- rank1 svd

def test_rank1_svd_examples():
    u, s, v = lr.rank1_svd(np.diag([3.0, 1.0]))
    assert s == pytest.approx(3.0, abs=1e-8)
    assert abs(abs(u[0]) - 1) < 1e-6 and abs(abs(v[0]) - 1) < 1e-6
    a, b = np.array([1.0, 2.0, -2.0]), np.array([3.0, 4.0])
    u, s, v = lr.rank1_svd(np.outer(a, b))
    assert s == pytest.approx(15.0, abs=1e-10)
    np.testing.assert_allclose(np.outer(u, v), np.outer(a, b) / 15.0, atol=1e-10)
    u, s, v = lr.rank1_svd(np.zeros((3, 2)))
    assert s == 0.0 and np.linalg.norm(u) == pytest.approx(1.0) and np.linalg.norm(v) == pytest.approx(1.0)


def test_rank1_svd_random_sparse():
    M = sparse.random(50, 40, density=0.2, random_state=3, format="csr")
    u, s, v = lr.rank1_svd(M, max_iter=2000)
    ref = np.linalg.svd(M.toarray(), compute_uv=False)[0]
    assert abs(s - ref) <= 1e-5 * ref
    assert np.linalg.norm(M @ v - s * u) <= 1e-6 * s
    assert np.linalg.norm(u) == pytest.approx(1.0) and np.linalg.norm(v) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        lr.rank1_svd(M, (40, 50))


def test_rank1_svd_residual_with_gap():
    rng = np.random.default_rng(4)
    Q1, Q2 = orth(rng, 30, 10), orth(rng, 20, 10)
    M = Q1 @ np.diag(np.linspace(10, 1, 10)) @ Q2.T
    u, s, v = lr.rank1_svd(M)
    assert np.linalg.norm(M @ v - s * u) <= 1e-6 * s


# -------------------------------------------------------------------- fw_qp

def test_fw_qp_first_step():
    a, b = lr.fw_qp(0.0, 0.0, -2.0, 0.0, 0.0, 1.0, 0.5)
    assert a == 0.0 and b == pytest.approx(1.5)
    assert lr.fw_qp(0.0, 0.0, -0.4, 0.0, 0.0, 1.0, 0.5)[1] == 0.0
    with pytest.raises(ValueError):
        lr.fw_qp(1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.5)


def test_fw_qp_grid_oracle():
    rng = np.random.default_rng(5)
    grid = np.linspace(0, 3, 400)
    A, Bg = np.meshgrid(grid, grid, indexing="ij")
    for _ in range(5):
        x = random_factor(rng, 6, 5, 2)
        x = FactoredMatrix(x.U, 0.3 * x.B, x.V)
        G = rng.standard_normal((6, 5))
        u1, s1, v = lr.rank1_svd(G)
        coeffs = lr.fw_step_coefficients(x, G, -u1, v)
        Lbar, mubar = rng.uniform(0.5, 2.0), rng.uniform(0.0, 1.0)
        a, b = lr.fw_qp(*coeffs, Lbar, mubar)
        assert a >= 0 and b >= 0
        best = lr.qp_objective(A, Bg, *coeffs, Lbar, mubar).min()
        assert lr.qp_objective(a, b, *coeffs, Lbar, mubar) <= best + 1e-8


def test_fw_qp_model_is_exact_for_quadratic():
    # on a fully observed square loss the model with Lbar = 1 is the loss itself
    rng = np.random.default_rng(6)
    x = random_factor(rng, 5, 4, 2)
    O = rng.standard_normal((5, 4))
    G = x.dense() - O
    u1, _, v = lr.rank1_svd(G)
    u = -u1
    c = lr.fw_step_coefficients(x, G, u, v)
    f0 = 0.5 * np.sum(G ** 2)
    for a, b in [(0.3, 0.7), (1.2, 0.1), (0.0, 2.0)]:
        Xn = a * x.dense() + b * np.outer(u, v)
        lhs = 0.5 * np.sum((Xn - O) ** 2)
        model = f0 + lr.qp_objective(a, b, *c, 1.0, 0.0)
        assert lhs == pytest.approx(model, abs=1e-10)


# ---------------------------------------------------------------- warmstart

def test_warmstart_examples():
    rng = np.random.default_rng(7)
    x = random_factor(rng, 6, 5, 2)
    u, v = rng.standard_normal(6), rng.standard_normal(5)
    u, v = u / np.linalg.norm(u), v / np.linalg.norm(v)
    y = lr.warmstart(x.U, u, x.V, v, x.B, 1.0, 0.0)
    assert np.linalg.norm(y.dense() - x.dense()) <= 1e-10
    y = lr.warmstart(np.zeros((6, 0)), u, np.zeros((5, 0)), v, np.zeros((0, 0)), 1.0, 1.0)
    np.testing.assert_array_equal(y.B, [[1.0]])
    np.testing.assert_array_equal(y.U[:, 0], u)
    y = lr.warmstart(x.U, u, x.V, v, x.B, 0.7, 0.3)
    assert np.linalg.norm(y.dense() - (0.7 * x.dense() + 0.3 * np.outer(u, v))) <= 1e-10


def test_warmstart_exact_on_100_instances():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        m, n = rng.integers(4, 12, size=2)
        k = int(rng.integers(1, min(m, n)))
        x = random_factor(rng, m, n, k)
        u, v = rng.standard_normal(m), rng.standard_normal(n)
        u, v = u / np.linalg.norm(u), v / np.linalg.norm(v)
        a, b = rng.uniform(0, 2, size=2)
        y = lr.warmstart(x.U, u, x.V, v, x.B, a, b)
        y.check()
        worst = max(worst, np.linalg.norm(y.dense() - (a * x.dense() + b * np.outer(u, v))))
    assert worst <= 1e-10


def test_warmstart_rank_deficient_update_prunes():
    rng = np.random.default_rng(9)
    x = random_factor(rng, 6, 5, 2)
    y = lr.warmstart(x.U, x.U[:, 0], x.V, x.V[:, 0], x.B, 1.0, 0.5)
    assert y.rank == 2
    assert np.linalg.norm(y.dense() - (x.dense() + 0.5 * np.outer(x.U[:, 0], x.V[:, 0]))) <= 1e-10


# ------------------------------------------------------- spectral properties

@pytest.mark.parametrize("spec", [LSP, KappaSpec("mcp", 1.0, 2.0), KappaSpec("scad", 0.5, 3.0)], ids=str)
def test_spectral_invariance(spec):
    rng = np.random.default_rng(10)
    for _ in range(50):
        x = random_factor(rng, 7, 6, 3)
        via_X = bar_spectral(spec, np.linalg.svd(x.dense(), compute_uv=False), 0.8)[0]
        via_B = bar_spectral(spec, np.linalg.eigvalsh(x.B), 0.8)[0]
        assert abs(via_X - via_B) <= 1e-8


def test_penalty_value_from_B():
    rng = np.random.default_rng(11)
    x = random_factor(rng, 7, 6, 3)
    s = np.linalg.svd(x.dense(), compute_uv=False)
    assert lr.penalty_value(x, LSP, 0.5) == pytest.approx(0.5 * np.sum(kappa_value(LSP, s)), abs=1e-12)
    assert lr.penalty_value(x, None, 0.5) == pytest.approx(0.5 * s.sum(), abs=1e-12)


def test_gradient_directional_derivative():
    rng = np.random.default_rng(12)
    m, n = 8, 6
    idx = rng.permutation(m * n)[:30]
    data = ObservedMatrix((m, n), idx // n, idx % n, rng.standard_normal(30))
    for spec in (LSP, KappaSpec("gp", 1.0, 2.0), None):
        for _ in range(5):
            x = random_factor(rng, m, n, 3, diag=True)
            G = lr.gradient_operator(x, data, spec, 0.7) @ np.eye(n)
            D = rng.standard_normal((m, n))
            h = 1e-6
            bar = (lambda X: fbar_dense(X, data, spec, 0.7)) if spec else (
                lambda X: 0.5 * float(np.sum((X[data.rows, data.cols] - data.values) ** 2)))
            fd = (bar(x.dense() + h * D) - bar(x.dense() - h * D)) / (2 * h)
            an = float(np.sum(G * D))
            assert abs(fd - an) <= 1e-4 * max(1.0, abs(an))


# ----------------------------------------------------------- local optimize

def test_local_optimize_keeps_critical_point():
    rng = np.random.default_rng(13)
    O = rng.standard_normal((6, 5))
    P, s, Qt = np.linalg.svd(O, full_matrices=False)
    mu = 0.8
    keep = s > mu
    x = FactoredMatrix(P[:, keep], np.diag(s[keep] - mu), Qt.T[:, keep])
    data = full_obs(O)
    f0 = lr.objective(x, data, None, mu)
    y = lr.local_optimize(x, data, None, mu)
    assert abs(lr.objective(y, data, None, mu) - f0) <= 1e-10


def test_local_optimize_decreases_from_perturbation():
    rng = np.random.default_rng(14)
    truth = random_factor(rng, 8, 7, 2)
    data = full_obs(truth.dense())
    noisy = FactoredMatrix(lr._retract(truth.U + 0.1 * rng.standard_normal((8, 2))),
                           truth.B + 0.1 * np.eye(2), lr._retract(truth.V + 0.1 * rng.standard_normal((7, 2))))
    for spec in (None, LSP):
        f0 = lr.objective(noisy, data, spec, 0.1)
        y = lr.local_optimize(noisy, data, spec, 0.1)
        y.check()
        assert lr.objective(y, data, spec, 0.1) < f0
        via_X = bar_spectral(LSP, np.linalg.svd(y.dense(), compute_uv=False), 0.1)[0]
        via_B = bar_spectral(LSP, np.linalg.eigvalsh(y.B), 0.1)[0]
        assert abs(via_X - via_B) <= 1e-8


# -------------------------------------------------------------------- fw

def test_fw_single_step_from_zero():
    rng = np.random.default_rng(15)
    O = rng.standard_normal((6, 5))
    data = full_obs(O)
    mu = 0.5
    x, tr = lr.fw_solve(data, None, mu, 1, FWParams(power_iterations=5000, power_tol=1e-15))
    P, s, Qt = np.linalg.svd(O)
    assert tr.extras["alpha"][1] == 0.0
    assert tr.extras["beta"][1] == pytest.approx(s[0] - mu, abs=1e-8)
    assert np.linalg.norm(x.dense() - (s[0] - mu) * np.outer(P[:, 0], Qt[0])) <= 1e-6


def dense_fw(data, mu, T):
    """Plain nuclear-norm Frank-Wolfe on dense matrices, same step model."""
    m, n = data.shape
    X = np.zeros((m, n))
    out = []
    for _ in range(T):
        G = np.zeros((m, n))
        G[data.rows, data.cols] = X[data.rows, data.cols] - data.values
        P, s, Qt = np.linalg.svd(G)
        u, v = -P[:, 0], Qt[0]
        sv = np.linalg.svd(X, compute_uv=False)
        c = (float(np.sum(X * X)), float(u @ X @ v), -s[0], float(np.sum(X * G)), float(sv.sum()))
        a, b = lr.fw_qp(*c, 1.0, mu)
        X = a * X + b * np.outer(u, v)
        R = X[data.rows, data.cols] - data.values
        out.append(0.5 * float(R @ R) + mu * np.linalg.svd(X, compute_uv=False).sum())
    return out


def test_convex_path_matches_dense_frank_wolfe():
    rng = np.random.default_rng(16)
    m, n = 10, 8
    O = rng.standard_normal((m, 3)) @ rng.standard_normal((3, n))
    idx = rng.permutation(m * n)[:50]
    data = ObservedMatrix((m, n), idx // n, idx % n, O.ravel()[idx])
    ref = dense_fw(data, 1.0, 8)
    _, tr = lr.fw_solve(data, None, 1.0, 8, FWParams(local_sweeps=0, power_iterations=5000, power_tol=1e-15))
    np.testing.assert_allclose(tr.objective[1:], ref, rtol=0, atol=1e-6)


def test_fw_trace_monotone_and_rank_growth():
    train, _, _ = lr.synth_lowrank(seed=0)
    x, tr = lr.fw_solve(train, LSP, 1.0, 8)
    warm = np.array(tr.extras["warm"][1:])
    obj = np.array(tr.objective[1:])
    assert np.all(obj <= warm + 1e-12)
    ranks = np.array(tr.extras["rank"])
    assert np.all(np.diff(ranks) <= 1)
    x.check()
    with pytest.raises(ValueError):
        lr.fw_solve(train, LSP, 1.0, 0)


def test_rank_r_attainment():
    rng = np.random.default_rng(17)
    m, n, r, mu = 12, 10, 3, 0.5
    U, V = orth(rng, m, r), orth(rng, n, r)
    s = np.array([5.0, 3.0, 2.0])
    # singular values chosen so that U diag(s) V^T is a critical point
    O = U @ np.diag(s + mu * kappa_derivative(LSP, s)) @ V.T
    data = full_obs(O)
    assert lr.critical_residual(FactoredMatrix(U, np.diag(s), V), data, LSP, mu) < 1e-10
    x, tr = lr.fw_solve(data, LSP, mu, r + 2)
    assert lr.critical_residual(x, data, LSP, mu) < 1e-4
    assert x.rank == r


def test_synth_lowrank_determinism():
    a = lr.synth_lowrank(seed=3)
    b = lr.synth_lowrank(seed=3)
    np.testing.assert_array_equal(a[0].values, b[0].values)
    np.testing.assert_array_equal(a[2], b[2])
    assert len(a[0]) == 150 and len(a[1]) == 150
    assert np.linalg.matrix_rank(a[2]) == 3


def test_local_optimize_undoes_rotation_within_span():
    # rotating U inside its own span changes U B V^T; only the skew part of
    # the Stiefel gradient can undo it
    rng = np.random.default_rng(14)
    O = orth(rng, 8, 2) @ np.diag([4.0, 2.5]) @ orth(rng, 6, 2).T + 0.05 * rng.standard_normal((8, 6))
    data = full_obs(O)
    P, s, Qt = np.linalg.svd(O)
    c, w = np.cos(0.4), np.sin(0.4)
    x = FactoredMatrix(P[:, :2] @ np.array([[c, -w], [w, c]]), np.diag(s[:2]), Qt[:2].T)
    assert lr.critical_residual(x, data, LSP, 0.5) > 0.5
    y = lr.local_optimize(x, data, LSP, 0.5, lr.FWParams(local_sweeps=2000))
    assert y.rank == 2
    assert lr.critical_residual(y, data, LSP, 0.5) <= 1e-6
