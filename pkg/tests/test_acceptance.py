"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (printed in the terminal summary) and
then asserts, so a failing criterion also fails the suite.
"""

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, blocks_for, random_problem
from nystrom_tron.allreduce import CommCostModel, LocalCluster, estimate_comm_cost, pinned_sum
from nystrom_tron.basis import extend_model
from nystrom_tron.data import from_dense, make_rng, shard_random, to_csr
from nystrom_tron.driver import DistributedOracle, TrainConfig, evaluate, serve, train
from nystrom_tron.kernel import BasisSet, HyperParams, kernel_matrix
from nystrom_tron.objective import ModelState, SerialOracle, dense_blocks
from nystrom_tron.reference import (approx_error, linearize, nystrom_reconstruct, pseudo_inverse,
                                    solve_nystrom, solve_full_kernel, solve_linearized)
from nystrom_tron.synthetic import ten_blobs, two_spirals
from nystrom_tron.tron import TronConfig, minimize

TIGHT = TronConfig(eps_rel=1e-10)


def record(k: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[k] = (bool(ok), detail)
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {k}: {detail}"


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def _off_boundary_beta(C, y, rng, margin=1e-3):
    """Random beta whose margins 1 - y*o all stay at least ``margin`` from 0."""
    while True:
        beta = rng.normal(size=C.shape[1])
        if np.abs(1 - y * (C @ beta)).min() > margin:
            return beta


# reachable in double precision on these instances; at 1e-8 and below some
# solves hit the rounding floor of f before the gradient test fires
CONTRACT = TronConfig(eps_rel=1e-6, cg_tol=1e-3, max_iter=5000)


def _formulation_pair(seed, cfg=None):
    """(nystrom, linearized) dense solutions plus test kernel rows for one criterion-3 instance."""
    ex, basis, C, W, y = random_problem(seed, 300, 50, d=3, sigma=1.5)
    C_tr, y_tr, C_te = C[:200], y[:200], C[200:]
    lam = 0.5
    kw = {} if cfg is None else {"cfg": cfg}
    return solve_nystrom(C_tr, W, y_tr, lam, **kw), solve_linearized(C_tr, W, y_tr, lam, **kw), C_te


def test_c01_gradient_finite_differences():
    t0 = time.monotonic()
    rng = make_rng(1)
    worst = 0.0
    for seed in range(20):
        ex, basis, C, W, y = random_problem(seed, 50, 10)
        _, blocks = blocks_for(ex, basis, 0.7, 3, seed)
        orc = SerialOracle(blocks, 0.7)
        beta = _off_boundary_beta(C, y, rng)
        d = rng.normal(size=10)
        h = 1e-6
        fd = (orc.fun(beta + h * d) - orc.fun(beta - h * d)) / (2 * h)
        _, g = orc.fun_grad(beta)
        worst = max(worst, _rel(fd, g @ d))
    dt = time.monotonic() - t0
    record(1, worst <= 1e-6 and dt < 5, f"max rel err {worst:.2e}, {dt:.2f}s")


def test_c02_distributed_hess_vec():
    t0 = time.monotonic()
    rng = make_rng(2)
    worst = 0.0
    for seed in range(20):
        ex, basis, C, W, y = random_problem(100 + seed, 30, 6)
        lam = 0.3
        p = 1 + seed % 4
        _, blocks = blocks_for(ex, basis, lam, p, seed)
        beta, d = rng.normal(size=6), rng.normal(size=6)

        def work(comm):
            if not comm.is_root:
                return serve(comm, blocks[comm.rank], lam)
            orc = DistributedOracle(comm, blocks[0], lam)
            orc.fun_grad(beta)
            orc.accept()
            hd = orc.hess_vec(d)
            orc.stop()
            return hd
        hd = LocalCluster(p).run(work)[0]
        D = (1 - y * (C @ beta) > 0).astype(float)
        ref = (lam * W + C.T @ (D[:, None] * C)) @ d
        worst = max(worst, np.linalg.norm(hd - ref) / np.linalg.norm(ref))
    dt = time.monotonic() - t0
    record(2, worst <= 1e-12 and dt < 5, f"max rel err {worst:.2e}, {dt:.2f}s")


def test_c03_formulation_equivalence():
    worst, agree = 0.0, True
    for seed in range(10):
        nys, lin, C_te = _formulation_pair(seed)
        worst = max(worst, _rel(nys.objective, lin.objective))
        s_nys = np.sign(C_te @ nys.coef)
        s_lin = np.sign(C_te @ lin.transform @ lin.coef)
        agree &= bool(np.all(s_nys == s_lin))
    record(3, worst <= 1e-6 and agree, f"max rel objective gap {worst:.2e}, signs agree: {agree}")


def test_c04_nystrom_exactness():
    rng = make_rng(4)
    X = rng.normal(size=(100, 3))
    y = np.where(np.sin(2 * X[:, 0]) + X[:, 1] > 0, 1, -1)
    ex = from_dense(X, y)
    # sigma sets the conditioning of K; at 1.5 cond(K) ~ 1e10 and the
    # pseudo-inverse alone loses ~1e-8 to rounding
    sigma, lam = 0.7, 0.5
    K = kernel_matrix(to_csr(ex), to_csr(ex), sigma)
    fro = approx_error(K, nystrom_reconstruct(K, pseudo_inverse(K))).frobenius_rel
    # the distributed driver with every training point in the basis,
    # against the exact kernel machine solved densely
    basis = BasisSet(to_csr(ex), "given", sigma)
    _, rep = train(ex, TrainConfig(lam, sigma, 100, p=2, tron=TIGHT), basis=basis)
    f1 = solve_full_kernel(K, y.astype(float), lam).objective
    gap = _rel(rep.final_objective, f1)
    record(4, fro <= 1e-8 and gap <= 1e-6, f"frobenius rel {fro:.2e}, objective gap {gap:.2e}")


def test_c05_serial_equals_distributed():
    X, y = two_spirals(600, seed=5, noise=0.6)
    ex = from_dense(X, y)
    basis = BasisSet(to_csr(ex[:40]), "given", 0.5)
    finals, bitwise = {}, True
    for p in (1, 2, 4, 8):
        cluster = LocalCluster(p, record=True)
        _, rep = train(ex, TrainConfig(1.0, 0.5, 40, p=p, tron=TIGHT), basis=basis,
                       cluster=cluster)
        finals[p] = rep.final_objective
        logs = [c.log for c in cluster.comms]
        for entries in zip(*logs):
            kinds = {e[0] for e in entries}
            assert len(kinds) == 1 and len({e[1] for e in entries}) == 1
            ref = pinned_sum([e[2] for e in entries], cluster.topo)
            root = entries[cluster.topo.root][3]
            bitwise &= ref.tobytes() == root.tobytes()
            if kinds == {"allreduce"}:
                bitwise &= all(e[3].tobytes() == ref.tobytes() for e in entries)
    gap = max(_rel(finals[1], f) for f in finals.values())
    record(5, gap <= 1e-8 and bitwise,
           f"max rel objective gap {gap:.2e} over p=1,2,4,8; rounds bitwise pinned: {bitwise}")


def test_c06_warm_start():
    ex, basis, C, W, y = random_problem(6, 400, 16, d=2, sigma=1.0)
    lam = 0.8
    shards, blocks = blocks_for(ex, basis, lam, 3)
    beta, _ = minimize(SerialOracle(blocks, lam), np.zeros(16), TIGHT)
    f_prev = SerialOracle(blocks, lam).fun(beta)
    model = ModelState(beta, basis, HyperParams(lam, 1.0))
    new = to_csr(ex[100:116], 2)
    grown, gblocks = extend_model(model, new, blocks, shards)
    f_pad = SerialOracle(gblocks, lam).fun(grown.beta)
    ident = _rel(f_pad, f_prev)

    X, yy = two_spirals(800, seed=6, noise=0.6)
    tr = from_dense(X, yy)
    staged, srep = train(tr, TrainConfig(1.0, 0.5, [8, 16, 32], p=2, tron=TIGHT))
    _, crep = train(tr, TrainConfig(1.0, 0.5, 32, p=2, tron=TIGHT), basis=staged.basis)
    chain = max(_rel(b.f_start, a.f_final) for a, b in zip(srep.stages, srep.stages[1:]))
    gap = _rel(srep.final_objective, crep.final_objective)
    ok = ident <= 1e-12 and chain <= 1e-12 and gap <= 1e-6
    record(6, ok, f"padded identity {ident:.1e}, stage chain {chain:.1e}, staged vs cold {gap:.2e}")


def test_c07_accuracy_vs_m():
    t0 = time.monotonic()
    ms = (4, 16, 64, 256)
    acc = {m: [] for m in ms}
    full = []
    for seed in range(5):
        X, y = two_spirals(7000, seed=seed, noise=0.8)
        tr, te = from_dense(X[:5000], y[:5000]), from_dense(X[5000:], y[5000:])
        for m in ms:
            cfg = TrainConfig(1.0, 0.5, m, shard_seed=seed, basis_seed=seed)
            model, _ = train(tr, cfg)
            acc[m].append(evaluate(model, te))
        sub = to_csr(tr[:1000])
        K = kernel_matrix(sub, sub, 0.5)
        alpha = solve_full_kernel(K, y[:1000].astype(float), 1.0, cfg=TronConfig(eps_rel=1e-6)).coef
        scores = kernel_matrix(to_csr(te, 2), sub, 0.5) @ alpha
        full.append(np.mean(np.where(scores >= 0, 1, -1) == y[5000:]))
    mean = [float(np.mean(acc[m])) for m in ms]
    oracle = float(np.mean(full))
    mono = all(b >= a - 0.005 for a, b in zip(mean, mean[1:]))
    close = abs(mean[-1] - oracle) <= 0.01
    dt = time.monotonic() - t0
    detail = ("mean acc " + ", ".join(f"m={m}:{a:.4f}" for m, a in zip(ms, mean))
              + f"; full kernel {oracle:.4f}; {dt:.0f}s")
    record(7, mono and close and dt < 120, detail)


def test_c08_kmeans_vs_random():
    res = {}
    for m in (10, 500):
        for policy in ("kmeans", "random"):
            accs = []
            for seed in range(5):
                X, y = ten_blobs(7000, seed)
                tr, te = from_dense(X[:5000], y[:5000]), from_dense(X[5000:], y[5000:])
                cfg = TrainConfig(1.0, 2.0, m, basis_policy=policy, shard_seed=seed,
                                  basis_seed=seed)
                model, _ = train(tr, cfg)
                accs.append(evaluate(model, te))
            res[m, policy] = float(np.mean(accs))
    small = res[10, "kmeans"] >= res[10, "random"]
    shrink = abs(res[500, "kmeans"] - res[500, "random"]) < 0.01
    detail = ", ".join(f"m={m} {pol}:{a:.4f}" for (m, pol), a in res.items())
    record(8, small and shrink, detail)


@pytest.mark.slow
def test_c09_linear_in_m():
    X, y = two_spirals(20000, seed=0, noise=0.8)
    ex = from_dense(X, y)
    step4 = {}
    for m in (1000, 2000):
        _, rep = train(ex, TrainConfig(1.0, 0.5, m))
        step4[m] = rep.step_times[4]
    ratio = step4[2000] / step4[1000]

    X, y = two_spirals(5000, seed=0, noise=0.8)
    pts = to_csr(from_dense(X, y))
    order = make_rng(0).permutation(5000)
    frac = []
    for m in (100, 400, 800):
        t0 = time.perf_counter()
        B = pts[order[:m]]
        C, W = kernel_matrix(pts, B, 0.5), kernel_matrix(B, B, 0.5)
        t1 = time.perf_counter()
        A, _ = linearize(C, W, method="lapack")
        t2 = time.perf_counter()
        minimize(SerialOracle(dense_blocks(A, np.eye(A.shape[1]), y.astype(float)), 1.0),
                 np.zeros(A.shape[1]), TronConfig(eps_rel=1e-4))
        t3 = time.perf_counter()
        frac.append((t2 - t1) / (t3 - t0))
    rising = all(b > a for a, b in zip(frac, frac[1:]))
    detail = (f"step-4 time {step4[1000]:.2f}s -> {step4[2000]:.2f}s (x{ratio:.2f}); "
              f"A fraction " + " -> ".join(f"{f:.3f}" for f in frac))
    record(9, ratio <= 3.0 and rising, detail)


def test_c10_tron_contract():
    ok_all, worst = True, 0.0
    for seed in range(10):
        nys, lin, _ = _formulation_pair(seed, CONTRACT)
        for sol in (nys, lin):
            t = sol.trace
            fs = [t.f0] + [r.f for r in t.records if r.accepted]
            dec = all(b < a for a, b in zip(fs, fs[1:]))
            met = t.status == "converged" and t.records[-1].gnorm <= CONTRACT.eps_rel * t.gnorm0
            ok_all &= dec and met
            worst = max(worst, t.records[-1].gnorm / t.gnorm0)
    # oracle-side counters against the trace, through the distributed path
    ex, basis, C, W, y = random_problem(10, 200, 50, d=3, sigma=1.5)
    _, blocks = blocks_for(ex, basis, 0.5, 3)

    def work(comm):
        if not comm.is_root:
            return serve(comm, blocks[comm.rank], 0.5)
        orc = DistributedOracle(comm, blocks[0], 0.5)
        _, tr = minimize(orc, np.zeros(50), CONTRACT)
        orc.stop()
        return tr, dict(orc.calls)
    res = LocalCluster(3).run(work)
    tr, calls = res[0]
    counted = (tr.n_fun_grad == calls["fun_grad"] and tr.n_hess_vec == calls["hess_vec"]
               and res[1] == res[2] == tr.n_fun_grad + tr.n_hess_vec + 1)
    record(10, ok_all and counted,
           f"monotone+converged on 20 solves: {ok_all} (worst g/g0 {worst:.1e}); counters equal: {counted}")


def test_c11_cost_model():
    rng = make_rng(11)
    exact = True
    for _ in range(10):
        N = int(rng.integers(1, 5000))
        C, D, B = rng.uniform(0, 1e-2), rng.uniform(0, 1e-8), float(rng.integers(8, 10**7))
        got = estimate_comm_cost(N, 5, CommCostModel(C, D, B))
        exact &= got == 5 * N * (C + D * B)
    record(11, exact, f"10 draws bitwise equal: {exact}")
