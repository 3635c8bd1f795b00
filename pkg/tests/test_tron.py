import numpy as np
import pytest

from conftest import random_problem
from nystrom_tron.objective import SerialOracle, dense_blocks
from nystrom_tron.tron import NumericalFailure, TronConfig, cg_steihaug, minimize


class Quadratic:
    """0.5 b'Ab - c'b with call counting."""

    def __init__(self, A, c):
        self.A, self.c = A, c
        self.calls = {"fun_grad": 0, "hess_vec": 0}

    def fun_grad(self, b):
        self.calls["fun_grad"] += 1
        return 0.5 * b @ self.A @ b - self.c @ b, self.A @ b - self.c

    def hess_vec(self, d):
        self.calls["hess_vec"] += 1
        return self.A @ d


def spd(rng, m, cond=10.0):
    Q, _ = np.linalg.qr(rng.normal(size=(m, m)))
    return Q @ np.diag(np.linspace(1, cond, m)) @ Q.T


def test_quadratic_converges_fast(rng):
    A, c = spd(rng, 5), rng.normal(size=5)
    q = Quadratic(A, c)
    b, tr = minimize(q, np.zeros(5), TronConfig(eps_rel=1e-8, cg_tol=1e-3))
    assert tr.status == "converged"
    assert tr.n_accepted <= 5 + 2
    assert np.allclose(b, np.linalg.solve(A, c), rtol=1e-7)
    assert tr.records[-1].gnorm <= 1e-8 * tr.gnorm0


def test_optimal_start_returns_immediately(rng):
    A, c = spd(rng, 4), rng.normal(size=4)
    b0 = np.linalg.solve(A, c)
    q = Quadratic(A, A @ b0)
    b, tr = minimize(q, b0)
    assert tr.records == [] and tr.status == "converged" and np.array_equal(b, b0)
    assert q.calls == {"fun_grad": 1, "hess_vec": 0}


def _gd_oracle(C, W, y, lam, iters=20_000):
    """Diagonally preconditioned, Nesterov-accelerated gradient descent (with
    function-value restarts) and a safe fixed step, run to a tiny gradient."""
    orc = SerialOracle(dense_blocks(C, W, y), lam)
    H = lam * W + C.T @ C  # bounds the generalized Hessian from above
    p2 = 1.0 / np.diag(H)
    L = np.linalg.eigvalsh(np.sqrt(p2)[:, None] * H * np.sqrt(p2)[None, :]).max()
    b = z = np.zeros(W.shape[0])
    f_prev, g0, t = np.inf, None, 1.0
    for _ in range(iters):
        fz, gz = orc.fun_grad(z)
        g0 = np.linalg.norm(gz) if g0 is None else g0
        if np.linalg.norm(gz) <= 1e-9 * g0:
            b = z
            break
        b_new = z - p2 * gz / L
        f_new = orc.fun(b_new)
        if f_new > f_prev:  # restart momentum
            t, z = 1.0, b
            continue
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        z = b_new + (t - 1) / t_new * (b_new - b)
        b, t, f_prev = b_new, t_new, f_new
    return orc.fun(b)


def test_matches_gradient_descent_oracle():
    _, _, C, W, y = random_problem(0, 200, 20, d=4, sigma=1.5)
    lam = 0.5
    orc = SerialOracle(dense_blocks(C, W, y), lam)
    b, tr = minimize(orc, np.zeros(20), TronConfig(eps_rel=1e-10))
    f_gd = _gd_oracle(C, W, y, lam)
    assert orc.fun(b) == pytest.approx(f_gd, rel=1e-6)


def test_cg_identity_examples():
    e1 = np.eye(3)[0]
    r = cg_steihaug(lambda d: d, -e1, 10.0)
    assert np.allclose(r.step, e1) and r.status == "converged"
    r = cg_steihaug(lambda d: d, -10 * e1, 1.0)
    assert np.allclose(r.step, e1) and r.status == "boundary"


def test_cg_matches_dense_solve(rng):
    H, g = spd(rng, 6, 50), rng.normal(size=6)
    r = cg_steihaug(lambda d: H @ d, g, 1e6, cg_tol=1e-12, cg_max=100)
    ref = np.linalg.solve(H, -g)
    assert np.linalg.norm(r.step - ref) <= 1e-8 * np.linalg.norm(ref)
    # the returned residual is -g - H s
    assert np.allclose(r.residual, -g - H @ r.step, atol=1e-10)


@pytest.mark.parametrize("seed", range(10))
def test_cg_radius_and_model_decrease(seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(6, 6))
    H = M + M.T  # indefinite in general
    g = rng.normal(size=6)
    delta = rng.uniform(0.01, 3)
    r = cg_steihaug(lambda d: H @ d, g, delta, cg_max=20)
    assert np.linalg.norm(r.step) <= delta * (1 + 1e-12)
    assert g @ r.step + 0.5 * r.step @ H @ r.step <= 1e-14


def test_cg_negative_curvature_goes_to_boundary():
    H = -np.eye(2)
    r = cg_steihaug(lambda d: H @ d, np.array([1.0, 0.0]), 2.0)
    assert r.status == "neg_curvature"
    assert np.linalg.norm(r.step) == pytest.approx(2.0)


def test_cg_rejects_nonfinite():
    with pytest.raises(NumericalFailure):
        cg_steihaug(lambda d: d * np.nan, np.ones(2), 1.0)
    with pytest.raises(ValueError):
        cg_steihaug(lambda d: d, np.ones(2), 0.0)


def test_nonfinite_objective_raises_with_iterate():
    class Bad:
        def fun_grad(self, b):
            return np.inf, b

        def hess_vec(self, d):
            return d
    with pytest.raises(NumericalFailure) as err:
        minimize(Bad(), np.ones(3))
    assert np.array_equal(err.value.iterate, np.ones(3))


def test_gradient_shape_mismatch():
    class Bad:
        def fun_grad(self, b):
            return 0.0, np.ones(2)

        def hess_vec(self, d):
            return d
    with pytest.raises(ValueError):
        minimize(Bad(), np.ones(3))


@pytest.mark.parametrize("seed", range(4))
def test_trace_monotone_counters_and_determinism(seed):
    _, _, C, W, y = random_problem(seed, 80, 12)
    orc = SerialOracle(dense_blocks(C, W, y), 0.3)
    b, tr = minimize(orc, np.zeros(12))
    f_acc = [tr.f0] + [r.f for r in tr.records if r.accepted]
    assert all(a > b for a, b in zip(f_acc, f_acc[1:]))
    assert tr.n_fun_grad == orc.calls["fun_grad"] == len(tr.records) + 1
    assert tr.n_hess_vec == orc.calls["hess_vec"] == sum(r.cg_steps for r in tr.records)
    assert all(r.cg_steps >= 1 for r in tr.records)
    orc2 = SerialOracle(dense_blocks(C, W, y), 0.3)
    b2, tr2 = minimize(orc2, np.zeros(12))
    assert np.array_equal(b, b2) and tr.to_csv() == tr2.to_csv()


def test_trace_csv_format():
    _, _, C, W, y = random_problem(5, 30, 5)
    _, tr = minimize(SerialOracle(dense_blocks(C, W, y), 1.0), np.zeros(5))
    lines = tr.to_csv().splitlines()
    assert lines[0] == "iter,f,gnorm,delta,cg_steps,accepted"
    assert len(lines) == len(tr.records) + 1
    cells = lines[1].split(",")
    assert len(cells) == 6 and cells[5] in ("0", "1")
    float(cells[1]), float(cells[3])


def test_max_iter_status():
    _, _, C, W, y = random_problem(6, 60, 10)
    _, tr = minimize(SerialOracle(dense_blocks(C, W, y), 0.01), np.zeros(10),
                     TronConfig(eps_rel=1e-14, max_iter=2))
    assert tr.status == "max_iter" and tr.n_accepted == 2


@pytest.mark.parametrize("kw", [
    {"eta0": 0.3, "eta1": 0.25}, {"eta2": 1.0}, {"sigma1": 0.6}, {"sigma3": 1.0},
    {"eps_rel": -1}, {"cg_tol": 0},
])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TronConfig(**kw)
