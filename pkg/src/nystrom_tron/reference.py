"""Desk-scale dense oracles: full-kernel training, pseudo-inverse Nystrom
reconstruction and the linearized (eigendecomposed) machine.

Nothing here is used on the distributed path. The eigensolver is a
self-contained cyclic Jacobi so these oracles do not lean on the code they
check; it is meant for matrices up to roughly 2000 x 2000.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .objective import SerialOracle, dense_blocks
from .tron import TronConfig, TronTrace, minimize

DEFAULT_CUTOFF = 1e-12
ORACLE_TRON = TronConfig(eps_rel=1e-10, cg_tol=1e-3, max_iter=5000)


def _round_robin(n: int):
    """n-1 rounds of n/2 disjoint index pairs covering every pair once (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _rotate_rows(M, p, q, c, s):
    Mp, Mq = M[p], M[q]
    M[p] = c[:, None] * Mp - s[:, None] * Mq
    M[q] = s[:, None] * Mp + c[:, None] * Mq


def jacobi_eigh(A, tol: float = 1e-15, max_sweeps: int = 60):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Rotations on disjoint index pairs are applied together (round-robin
    ordering), so each sweep is n-1 vectorized updates. Returns
    ``(eigenvalues ascending, eigenvectors as columns)``.
    """
    A = np.array(A, dtype=np.float64, copy=True)
    n0 = A.shape[0]
    if A.shape != (n0, n0):
        raise ValueError("matrix must be square")
    if n0 == 0:
        return np.zeros(0), np.zeros((0, 0))
    A = 0.5 * (A + A.T)
    n = n0 + (n0 % 2)
    if n != n0:
        # an isolated zero row/column pads to even size and never mixes in
        A = np.pad(A, ((0, 1), (0, 1)))
    Vt = np.eye(n)  # transposed eigenvector matrix
    scale = np.linalg.norm(A)
    if scale == 0:
        return np.zeros(n0), np.eye(n0)
    rounds = _round_robin(n)
    floor = 1e-17 * scale
    for _ in range(max_sweeps):
        rotated = 0
        for p, q in rounds:
            apq = A[p, q]
            app = A[p, p]
            aqq = A[q, q]
            act = (np.abs(apq) > tol * np.sqrt(np.abs(app * aqq))) & (np.abs(apq) > floor)
            if not act.any():
                continue
            p, q, apq, app, aqq = p[act], q[act], apq[act], app[act], aqq[act]
            rotated += p.size
            tau = (aqq - app) / (2.0 * apq)
            with np.errstate(over="ignore"):
                big = np.abs(tau) > 1e150
                t = np.where(big, 0.5 / np.where(big, tau, 1.0),
                             1.0 / (np.abs(tau) + np.sqrt(1.0 + tau * tau)))
            t = np.where(big, t, np.where(tau >= 0, t, -t))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            _rotate_rows(A, p, q, c, s)
            # J'AJ is symmetric, so the column pass is a row pass on the transpose
            A = A.T.copy()
            _rotate_rows(A, p, q, c, s)
            A[p, q] = 0.0
            A[q, p] = 0.0
            _rotate_rows(Vt, p, q, c, s)
        if not rotated:
            break
    w = np.diag(A).copy()
    V = Vt.T
    if n != n0:
        # the padded coordinate stays decoupled: drop its eigenpair
        pad = int(np.argmax(np.abs(V[n0, :])))
        keep = np.arange(n) != pad
        w, V = w[keep], V[:n0, keep]
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


def eigh(A, method: str = "jacobi"):
    if method == "jacobi":
        return jacobi_eigh(A)
    if method == "lapack":
        return np.linalg.eigh(0.5 * (np.asarray(A) + np.asarray(A).T))
    raise ValueError(f"unknown eigensolver {method!r}")


def _kept(w, cutoff_rel):
    lmax = w.max() if w.size else 0.0
    if lmax <= 0:
        return np.zeros(w.shape, dtype=bool)
    return w > cutoff_rel * lmax


def pseudo_inverse(W, cutoff_rel: float = DEFAULT_CUTOFF, method: str = "jacobi") -> np.ndarray:
    """U diag(1/lambda) U' over eigenvalues above ``cutoff_rel * lambda_max``."""
    w, U = eigh(W, method)
    keep = _kept(w, cutoff_rel)
    Uk = U[:, keep]
    return (Uk / w[keep]) @ Uk.T


def nystrom_reconstruct(C, W_plus) -> np.ndarray:
    C = np.asarray(C)
    return C @ W_plus @ C.T


@dataclass(frozen=True)
class ApproxError:
    frobenius_rel: float
    spectral_rel: float


def approx_error(K, K_tilde, method: str = "jacobi") -> ApproxError:
    K = np.asarray(K)
    E = K - np.asarray(K_tilde)
    fro = np.linalg.norm(E) / np.linalg.norm(K)
    spec_e = np.abs(eigh(E, method)[0]).max()
    spec_k = np.abs(eigh(K, method)[0]).max()
    return ApproxError(float(fro), float(spec_e / spec_k))


@dataclass
class DenseSolution:
    coef: np.ndarray
    objective: float
    trace: TronTrace
    transform: np.ndarray | None = None  # maps kernel rows to linear features (linearized form)


def solve_nystrom(C, W, y, lam: float, loss: str = "squared_hinge",
              cfg: TronConfig = ORACLE_TRON, beta0=None) -> DenseSolution:
    """min (lam/2) b'Wb + L(Cb, y) on one machine."""
    oracle = SerialOracle(dense_blocks(C, W, y), lam, loss)
    b0 = np.zeros(np.shape(W)[0]) if beta0 is None else beta0
    beta, trace = minimize(oracle, b0, cfg)
    return DenseSolution(beta, oracle.fun(beta), trace)


def linearize(C, W, cutoff_rel: float = DEFAULT_CUTOFF, method: str = "jacobi"):
    """A = C U Lambda^{-1/2} over kept eigenvalues, and the transform U Lambda^{-1/2}."""
    w, U = eigh(W, method)
    keep = _kept(w, cutoff_rel)
    T = U[:, keep] / np.sqrt(w[keep])
    return np.asarray(C) @ T, T


def solve_linearized(C, W, y, lam: float, cutoff_rel: float = DEFAULT_CUTOFF,
                     loss: str = "squared_hinge", cfg: TronConfig = ORACLE_TRON,
                     method: str = "jacobi") -> DenseSolution:
    """min (lam/2)||w||^2 + L(Aw, y). Decision values for kernel rows c are c @ transform @ coef."""
    A, T = linearize(C, W, cutoff_rel, method)
    k = A.shape[1]
    oracle = SerialOracle(dense_blocks(A, np.eye(k), y), lam, loss)
    w, trace = minimize(oracle, np.zeros(k), cfg)
    return DenseSolution(w, oracle.fun(w), trace, T)


def solve_full_kernel(K, y, lam: float, loss: str = "squared_hinge",
                      cfg: TronConfig = ORACLE_TRON) -> DenseSolution:
    """min (lam/2) a'Ka + L(Ka, y): the exact kernel machine."""
    return solve_nystrom(K, K, y, lam, loss, cfg)
