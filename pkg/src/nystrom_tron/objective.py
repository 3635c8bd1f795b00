"""Value, gradient and Hessian-vector products of

    f(beta) = (lam/2) beta' W beta + sum_i l(c_i beta, y_i)

as per-worker partial sums that are combined by a reduce.

Two losses are supported: the squared hinge ``0.5*max(1 - y*o, 0)**2`` and
the squared error ``0.5*(o - y)**2``. The Hessian is the Gauss-Newton one,
``lam*W + C' D C``, with the active set D frozen at the last evaluated point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .kernel import BasisSet, HyperParams, KernelBlock, parse_basis_lines

LOSSES = ("squared_hinge", "squared_error")


class ContractViolation(ValueError):
    pass


@dataclass
class ModelState:
    beta: np.ndarray
    basis: BasisSet
    params: HyperParams
    loss: str = "squared_hinge"

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.beta.shape != (self.basis.m,):
            raise ContractViolation(f"beta has shape {self.beta.shape}, basis has m={self.basis.m}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")


@dataclass(frozen=True)
class LossState:
    outputs: np.ndarray
    active_mask: np.ndarray


@dataclass
class LocalPartials:
    f_reg_part: float = 0.0
    f_loss_part: float = 0.0
    g_part: np.ndarray | None = None
    hd_part: np.ndarray | None = None


def _check_len(block: KernelBlock, v: np.ndarray, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (block.m,):
        raise ContractViolation(f"{name} has shape {v.shape}, expected ({block.m},)")
    return v


def local_outputs(block: KernelBlock, beta, loss: str = "squared_hinge") -> LossState:
    beta = _check_len(block, beta, "beta")
    o = block.c_block @ beta
    if loss == "squared_hinge":
        mask = 1.0 - block.labels * o > 0.0
    elif loss == "squared_error":
        mask = np.ones(o.shape, dtype=bool)
    else:
        raise ValueError(f"unknown loss {loss!r}")
    return LossState(o, mask)


def _scatter_w(block: KernelBlock, v: np.ndarray) -> np.ndarray:
    """The worker's rows of W @ v, placed at their global positions."""
    out = np.zeros(block.m)
    out[block.w_row_ids] = block.w_rows @ v
    return out


def local_objective(block: KernelBlock, state: LossState, beta, lam: float) -> LocalPartials:
    beta = _check_len(block, beta, "beta")
    wb = block.w_rows @ beta
    r = state.outputs - block.labels
    r = r[state.active_mask]
    return LocalPartials(
        f_reg_part=float(beta[block.w_row_ids] @ wb),
        f_loss_part=0.5 * float(r @ r),
    )


def local_gradient(block: KernelBlock, state: LossState, beta, lam: float) -> LocalPartials:
    beta = _check_len(block, beta, "beta")
    resid = np.where(state.active_mask, state.outputs - block.labels, 0.0)
    g = lam * _scatter_w(block, beta) + block.c_block.T @ resid
    return LocalPartials(g_part=g)


def local_hessian_vec(block: KernelBlock, state: LossState, d, lam: float) -> LocalPartials:
    d = _check_len(block, d, "d")
    cd = np.where(state.active_mask, block.c_block @ d, 0.0)
    hd = lam * _scatter_w(block, d) + block.c_block.T @ cd
    return LocalPartials(hd_part=hd)


def combine_objective(lam: float, reg_sum: float, loss_sum: float) -> float:
    return 0.5 * lam * reg_sum + loss_sum


class SerialOracle:
    """Function/gradient/Hd oracle over a list of blocks in one process.

    Partial sums are added in block order. ``accept()`` freezes the active
    set of the last ``fun_grad`` point for subsequent ``hess_vec`` calls.
    """

    def __init__(self, blocks: Sequence[KernelBlock] | KernelBlock, lam: float,
                 loss: str = "squared_hinge"):
        self.blocks = [blocks] if isinstance(blocks, KernelBlock) else list(blocks)
        self.lam = lam
        self.loss = loss
        self.m = self.blocks[0].m
        self.calls = {"fun_grad": 0, "hess_vec": 0}
        self._trial = None
        self._current = None

    def fun(self, beta) -> float:
        reg = loss = 0.0
        for b in self.blocks:
            st = local_outputs(b, beta, self.loss)
            part = local_objective(b, st, beta, self.lam)
            reg += part.f_reg_part
            loss += part.f_loss_part
        return combine_objective(self.lam, reg, loss)

    def fun_grad(self, beta):
        self.calls["fun_grad"] += 1
        states = [local_outputs(b, beta, self.loss) for b in self.blocks]
        reg = loss = 0.0
        g = np.zeros(self.m)
        for b, st in zip(self.blocks, states):
            part = local_objective(b, st, beta, self.lam)
            reg += part.f_reg_part
            loss += part.f_loss_part
            g += local_gradient(b, st, beta, self.lam).g_part
        self._trial = states
        return combine_objective(self.lam, reg, loss), g

    def accept(self):
        self._current = self._trial

    def hess_vec(self, d):
        if self._current is None:
            raise RuntimeError("hess_vec before any accepted fun_grad")
        self.calls["hess_vec"] += 1
        hd = np.zeros(self.m)
        for b, st in zip(self.blocks, self._current):
            hd += local_hessian_vec(b, st, d, self.lam).hd_part
        return hd


def dense_blocks(C, W, y) -> KernelBlock:
    """Wrap explicit C, W, y as a single block holding all rows of W."""
    C = np.asarray(C, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    return KernelBlock(C, W, np.arange(W.shape[0]), np.asarray(y, dtype=np.float64))


def decision_values(C_test, beta) -> np.ndarray:
    return np.asarray(C_test) @ np.asarray(beta)


def sign_labels(scores) -> np.ndarray:
    """Sign with exact zeros mapped to +1."""
    return np.where(np.asarray(scores) >= 0.0, 1, -1)


# Checkpoint: a text header line, m basis lines, a "#beta <m>" line, raw LE float64.
_CKPT_TAG = "#nystrom-model"


def save_model(path, model: ModelState) -> None:
    b = model.basis
    header = (f"{_CKPT_TAG} m={b.m} d={b.dim} sigma={model.params.sigma!r} "
              f"lambda={model.params.lam!r} loss={model.loss} source={b.source}\n")
    with open(path, "wb") as fh:
        fh.write(header.encode())
        fh.write(b.to_text().encode())
        fh.write(f"#beta {b.m}\n".encode())
        fh.write(model.beta.astype("<f8").tobytes())


def _parse_header(line: str, tag: str) -> dict:
    parts = line.split()
    if not parts or parts[0] != tag:
        raise ValueError(f"expected header starting with {tag!r}")
    return dict(p.split("=", 1) for p in parts[1:])


def load_model(path) -> ModelState:
    with open(path, "rb") as fh:
        meta = _parse_header(fh.readline().decode(), _CKPT_TAG)
        m, d = int(meta["m"]), int(meta["d"])
        lines = [fh.readline().decode() for _ in range(m)]
        tail = fh.readline().decode().split()
        if tail != ["#beta", str(m)]:
            raise ValueError("missing #beta marker")
        beta = np.frombuffer(fh.read(8 * m), dtype="<f8").astype(np.float64)
    sigma = float(meta["sigma"])
    basis = BasisSet(parse_basis_lines(lines, m, d), meta["source"], sigma)
    return ModelState(beta, basis, HyperParams(float(meta["lambda"]), sigma), meta["loss"])

