import numpy as np
import pytest

from nystrom_tron.data import from_dense, shard_random
from nystrom_tron.kernel import BasisSet, HyperParams, build_kernel_block, kernel_matrix, w_row_ranges
from nystrom_tron.data import to_csr


def random_problem(seed, n, m, d=3, sigma=1.0, scale=1.0):
    """Distinct random points; the basis is the first m of them.

    Returns (examples, basis, C, W, y) with C, W computed densely.
    """
    rng = np.random.default_rng(seed)
    X = scale * rng.normal(size=(n, d))
    y = np.where(rng.random(n) < 0.5, 1, -1)
    examples = from_dense(X, y)
    basis = BasisSet(to_csr(examples[:m], d), "given", sigma)
    C = kernel_matrix(to_csr(examples, d), basis.points, sigma)
    W = kernel_matrix(basis.points, basis.points, sigma)
    return examples, basis, C, W, y.astype(float)


def blocks_for(examples, basis, lam, p, seed=0):
    """Shards and per-worker kernel blocks for p workers."""
    shards = shard_random(examples, p, seed)
    params = HyperParams(lam, basis.sigma)
    ranges = w_row_ranges(basis.m, p)
    return shards, [build_kernel_block(s, basis, params, r) for s, r in zip(shards, ranges)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
