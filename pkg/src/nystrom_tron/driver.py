"""End-to-end distributed training.

Every worker runs the same program (:func:`train_spmd`):

1. data loading: take this worker's random shard;
2. basis communication: select basis points and broadcast them;
3. kernel computation: build the local rows of C and slice of W;
4. optimization: worker 0 runs TRON; every function/gradient and Hd
   evaluation is one broadcast of the command from the master followed by
   local partial sums that are reduced back to it.

Steps are separated by barriers and timed on the master with a monotonic
clock. With several stages the basis grows between them and the previous
coefficients are reused, padded with zeros.
"""

from __future__ import annotations

import json
import logging
import multiprocessing as mp
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .allreduce import Communicator, LocalCluster, TcpThreadCluster, TcpTransport, TreeTopology
from .basis import (KMEANS_MAX_FEATURES, KMEANS_MAX_M, centers_to_basis, dedupe_new_points,
                    kmeans_spmd, new_row_assignment, select_random_spmd, use_kmeans)
from .data import ConfigurationError, SparseExample, load_dataset, n_features, shard_random, to_csr
from .kernel import (BasisSet, HyperParams, build_kernel_block, extend_kernel_block,
                     kernel_matrix, load_kernel_block, save_kernel_block, w_row_ranges)
from .objective import (ModelState, combine_objective, local_gradient, local_hessian_vec,
                        local_objective, local_outputs, sign_labels)
from .tron import TronConfig, TronTrace, minimize

logger = logging.getLogger(__name__)

PRESETS = {
    "vehicle": HyperParams(lam=8.0, sigma=2.0),
    "covtype": HyperParams(lam=0.005, sigma=0.09),
    "ccat": HyperParams(lam=8.0, sigma=0.7),
    "mnist8m": HyperParams(lam=8.0, sigma=7.0),
}

FUN_GRAD, HESS_VEC, STOP = 1, 2, 3

STEP_NAMES = {1: "data loading", 2: "basis communication", 3: "kernel computation",
              4: "TRON optimization"}


class StepFailed(RuntimeError):
    """A worker failed inside one training step; the original error is ``__cause__``."""

    def __init__(self, step: int, rank: int, exc: BaseException):
        super().__init__(f"step {step} ({STEP_NAMES[step]}) failed on worker {rank}: "
                         f"{type(exc).__name__}: {exc}")
        self.step = step
        self.rank = rank


@contextmanager
def _step(k: int, comm):
    try:
        yield
    except StepFailed:
        raise
    except Exception as exc:
        raise StepFailed(k, comm.rank, exc) from exc


@dataclass(frozen=True)
class TrainConfig:
    lam: float
    sigma: float
    m: int | Sequence[int]  # an int, or increasing stage sizes
    basis_policy: str = "random"  # random | kmeans | auto
    p: int = 1
    fanout: int = 2
    transport: str = "local"  # local | tcp
    shard_seed: int = 0
    basis_seed: int = 0
    kmeans_iters: int = 3
    kmeans_max_m: int = KMEANS_MAX_M
    kmeans_max_features: int = KMEANS_MAX_FEATURES
    loss: str = "squared_hinge"
    tron: TronConfig = field(default_factory=TronConfig)

    @property
    def params(self) -> HyperParams:
        return HyperParams(self.lam, self.sigma)

    @property
    def stages(self) -> list[int]:
        stages = [self.m] if isinstance(self.m, (int, np.integer)) else list(self.m)
        if not stages or any(b <= a for a, b in zip(stages, stages[1:])) or stages[0] < 1:
            raise ConfigurationError(f"stage sizes must be positive and increasing: {stages}")
        return [int(s) for s in stages]

    def echo(self) -> dict:
        out = asdict(self)
        out["m"] = self.stages
        return out


@dataclass
class StageReport:
    m: int
    step_times: dict
    kmeans_time: float
    f_start: float
    f_final: float
    trace: TronTrace
    collectives: dict
    kernel_evals: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trace"] = self.trace.to_dict()
        return d


@dataclass
class TrainReport:
    step_times: dict  # {1: load, 2: basis, 3: kernel, 4: TRON}, summed over stages
    kmeans_time: float
    tron_trace: TronTrace  # last stage
    final_objective: float
    test_accuracy: float | None
    config: dict
    stages: list = field(default_factory=list)
    n_train: int = 0
    n_features: int = 0

    def to_dict(self) -> dict:
        return {
            "step_times": {str(k): v for k, v in self.step_times.items()},
            "kmeans_time": self.kmeans_time,
            "tron_trace": self.tron_trace.to_dict(),
            "final_objective": self.final_objective,
            "test_accuracy": self.test_accuracy,
            "config": self.config,
            "stages": [s.to_dict() for s in self.stages],
            "n_train": self.n_train,
            "n_features": self.n_features,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), default=_json_default, **kw)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


# -- step 4: distributed oracle -----------------------------------------------

class _WorkerState:
    """Local half of every oracle round; identical on master and workers."""

    def __init__(self, comm, block, lam: float, loss: str):
        self.comm, self.block, self.lam, self.loss = comm, block, lam, loss
        self.current = None
        self.trial = None

    def handle(self, cmd: np.ndarray):
        """Execute one broadcast command; returns the reduced result on the master."""
        op, commit, vec = int(cmd[0]), cmd[1], cmd[2:]
        if commit:
            self.current = self.trial
        if op == STOP:
            return None
        if op == FUN_GRAD:
            st = local_outputs(self.block, vec, self.loss)
            part = local_objective(self.block, st, vec, self.lam)
            self.trial = st
            fsum = self.comm.reduce_sum([part.f_reg_part, part.f_loss_part])
            gsum = self.comm.reduce_sum(local_gradient(self.block, st, vec, self.lam).g_part)
            return fsum, gsum
        if op == HESS_VEC:
            return self.comm.reduce_sum(
                local_hessian_vec(self.block, self.current, vec, self.lam).hd_part
            )
        raise ValueError(f"unknown command {op}")


def serve(comm, block, lam: float, loss: str = "squared_hinge") -> int:
    """Worker loop: answer oracle rounds until the master says stop. Returns rounds served."""
    state = _WorkerState(comm, block, lam, loss)
    rounds = 0
    while True:
        cmd = comm.broadcast_vector()
        rounds += 1
        state.handle(cmd)
        if int(cmd[0]) == STOP:
            return rounds


class DistributedOracle:
    """Master-side oracle: one broadcast + two reduces per f/g, one broadcast + one reduce per Hd."""

    def __init__(self, comm, block, lam: float, loss: str = "squared_hinge"):
        self.comm = comm
        self.lam = lam
        self.state = _WorkerState(comm, block, lam, loss)
        self.m = block.m
        self._commit = 0.0
        self.calls = {"fun_grad": 0, "hess_vec": 0}

    def _round(self, op, vec):
        cmd = np.concatenate([[op, self._commit], np.asarray(vec, dtype=np.float64)])
        self._commit = 0.0
        self.comm.broadcast_vector(cmd)
        return self.state.handle(cmd)

    def fun_grad(self, beta):
        self.calls["fun_grad"] += 1
        fsum, g = self._round(FUN_GRAD, beta)
        return combine_objective(self.lam, fsum[0], fsum[1]), g

    def accept(self):
        self._commit = 1.0

    def hess_vec(self, d):
        self.calls["hess_vec"] += 1
        return self._round(HESS_VEC, d)

    def stop(self):
        self._round(STOP, np.zeros(0))


# -- the SPMD program ---------------------------------------------------------

def _counters(comm) -> dict:
    return dict(comm.counters)


def _delta(after: dict, before: dict) -> dict:
    return {k: after[k] - before.get(k, 0) for k in after}


def _select_initial_basis(comm, shard, cfg: TrainConfig, m: int, d: int, basis: BasisSet | None):
    """Returns (basis, kmeans_seconds). ``basis`` given on the master is broadcast as is."""
    kmeans_time = 0.0
    policy = cfg.basis_policy
    if basis is not None or policy == "given":
        if comm.is_root and basis is None:
            raise ConfigurationError("basis policy 'given' needs a basis set")
        if comm.is_root and basis.m != m:
            raise ConfigurationError(f"given basis has {basis.m} points but m={m}")
        payload = basis.to_bytes() if comm.is_root else None
        return BasisSet.from_bytes(comm.broadcast(payload)), 0.0
    if policy == "auto":
        policy = "kmeans" if use_kmeans(m, d, cfg.kmeans_max_m, cfg.kmeans_max_features) else "random"
    if policy == "kmeans":
        t = time.monotonic()
        res = kmeans_spmd(comm, shard, m, cfg.kmeans_iters, cfg.basis_seed, d)
        kmeans_time = time.monotonic() - t
        # replicated already; the master's copy is the one broadcast as the basis
        payload = centers_to_basis(res.centers, cfg.sigma).to_bytes() if comm.is_root else None
        return BasisSet.from_bytes(comm.broadcast(payload)), kmeans_time
    if policy == "random":
        return select_random_spmd(comm, shard, m, cfg.basis_seed, cfg.sigma), 0.0
    raise ConfigurationError(f"unknown basis policy {policy!r}")


def _cached_block(cache_dir, comm, shard, basis: BasisSet, params: HyperParams, rows):
    """Load this worker's block from ``cache_dir`` if it matches, else build and store it."""
    path = os.path.join(cache_dir, f"block-{comm.rank}-of-{comm.p}.kbc")
    digest = basis.digest()
    if os.path.exists(path):
        try:
            block, _, _ = load_kernel_block(path, params.sigma, digest)
            if block.n == len(shard) and np.array_equal(block.w_row_ids, np.asarray(rows)) \
                    and np.array_equal(block.labels, shard.labels):
                return block
            logger.info("worker %d: cached block does not match this shard, rebuilding", comm.rank)
        except ValueError as exc:
            logger.info("worker %d: ignoring kernel cache (%s)", comm.rank, exc)
    block = build_kernel_block(shard, basis, params, rows)
    os.makedirs(cache_dir, exist_ok=True)
    save_kernel_block(path, block, params.sigma, digest)
    return block


def train_spmd(comm, shard, cfg: TrainConfig, load_time: float = 0.0,
               basis: BasisSet | None = None, n_train: int = 0, cache_dir=None):
    """Run on every worker. The master returns ``(model, report)``, others ``None``.

    With ``cache_dir`` the first stage's kernel block is read from (or
    written to) a per-worker cache file keyed by sigma and the basis hash.
    """
    params = cfg.params
    with _step(1, comm):
        cfg.stages  # validates the schedule on every worker
        dims = np.zeros(comm.p)
        dims[comm.rank] = n_features(shard.examples)
        d = int(comm.allreduce_sum(dims).max())
        comm.barrier()

    stage_reports = []
    model = None
    block = None
    cur_basis = None
    beta = None
    for s, m in enumerate(cfg.stages):
        times = {1: load_time if s == 0 else 0.0}
        # step 2
        t0 = time.monotonic()
        kmeans_time = 0.0
        with _step(2, comm):
            if s == 0:
                cur_basis, kmeans_time = _select_initial_basis(comm, shard, cfg, m, d, basis)
                new_basis = cur_basis
            else:
                q = m - cur_basis.m
                # k-means centers carry no origin ids; duplicates are then caught by dedupe
                extra = select_random_spmd(comm, shard, q, cfg.basis_seed + s, cfg.sigma,
                                           cur_basis.origin_ids)
                pts, ids = dedupe_new_points(cur_basis, extra.points, extra.origin_ids)
                new_basis = cur_basis.append(pts, ids)
            comm.barrier()
        t1 = time.monotonic()
        times[2] = t1 - t0 - kmeans_time

        # step 3
        with _step(3, comm):
            if s == 0:
                rows = w_row_ranges(new_basis.m, comm.p)[comm.rank]
                if cache_dir is not None:
                    block = _cached_block(cache_dir, comm, shard, new_basis, params, rows)
                else:
                    block = build_kernel_block(shard, new_basis, params, rows)
                beta = np.zeros(new_basis.m)
            else:
                rows = new_row_assignment(cur_basis.m, new_basis.m - cur_basis.m,
                                          comm.p)[comm.rank]
                block = extend_kernel_block(block, shard, cur_basis, new_basis, rows, params)
                beta = np.concatenate([beta, np.zeros(new_basis.m - cur_basis.m)])
            cur_basis = new_basis
            evals = np.zeros(comm.p)
            evals[comm.rank] = block.kernel_evals
            evals = comm.allreduce_sum(evals)
            comm.barrier()
        t2 = time.monotonic()
        times[3] = t2 - t1

        # step 4
        with _step(4, comm):
            before = _counters(comm)
            if comm.is_root:
                oracle = DistributedOracle(comm, block, cfg.lam, cfg.loss)
                beta, trace = minimize(oracle, beta, cfg.tron)
                oracle.stop()
            else:
                serve(comm, block, cfg.lam, cfg.loss)
            coll = _delta(_counters(comm), before)
            comm.barrier()
        times[4] = time.monotonic() - t2

        if comm.is_root:
            f_final = trace.records[-1].f if trace.records else trace.f0
            stage_reports.append(StageReport(cur_basis.m, times, kmeans_time, trace.f0, f_final,
                                             trace, coll, int(evals.sum())))
            model = ModelState(beta, cur_basis, params, cfg.loss)
        else:
            beta = np.zeros(cur_basis.m)

    if not comm.is_root:
        return None
    step_times = {k: sum(r.step_times[k] for r in stage_reports) for k in (1, 2, 3, 4)}
    last = stage_reports[-1]
    report = TrainReport(
        step_times=step_times,
        kmeans_time=sum(r.kmeans_time for r in stage_reports),
        tron_trace=last.trace,
        final_objective=last.f_final,
        test_accuracy=None,
        config=cfg.echo(),
        stages=stage_reports,
        n_train=n_train,
        n_features=d,
    )
    return model, report


# -- entry points -------------------------------------------------------------

def _load(data) -> list[SparseExample]:
    if isinstance(data, (str, os.PathLike)):
        return load_dataset(data)
    return list(data)


def _tcp_rank_main(rank, hosts, data, cfg, basis, cache_dir=None):
    """One TCP worker process (or the master when ``rank == 0``)."""
    t = time.monotonic()
    examples = _load(data)
    shards = shard_random(examples, cfg.p, cfg.shard_seed)
    load_time = time.monotonic() - t
    topo = TreeTopology(cfg.p, cfg.fanout)
    comm = Communicator(rank, topo, TcpTransport(rank, hosts, topo))
    try:
        out = train_spmd(comm, shards[rank], cfg, load_time, basis, len(examples), cache_dir)
        comm.shutdown()
    finally:
        comm.transport.close()
    return out


def train(train_data, cfg: TrainConfig, test_data=None, basis: BasisSet | None = None,
          hosts=None, rank: int | None = None, cluster=None, cache_dir=None):
    """Train a model; returns ``(ModelState, TrainReport)``.

    ``train_data``/``test_data`` are paths or lists of examples. With
    ``transport="tcp"``, ``hosts`` lists ``(host, port)`` per rank: pass
    ``rank`` to run just that worker (non-zero ranks return ``None``), or
    leave it out to start all ranks on this machine as processes. Without
    hosts, tcp runs the workers as threads over loopback sockets.
    """
    if cfg.transport == "tcp" and hosts is not None:
        if len(hosts) != cfg.p:
            raise ConfigurationError(f"{len(hosts)} hosts for p={cfg.p}")
        if rank is not None:
            out = _tcp_rank_main(rank, hosts, train_data, cfg, basis, cache_dir)
        else:
            ctx = mp.get_context("spawn")
            procs = [ctx.Process(target=_tcp_rank_main, args=(r, hosts, train_data, cfg, basis, cache_dir),
                                 daemon=True) for r in range(1, cfg.p)]
            for pr in procs:
                pr.start()
            try:
                out = _tcp_rank_main(0, hosts, train_data, cfg, basis, cache_dir)
            finally:
                for pr in procs:
                    pr.join(timeout=60)
            bad = [pr.exitcode for pr in procs if pr.exitcode != 0]
            if bad:
                raise RuntimeError(f"worker processes exited with codes {bad}")
        if out is None:
            return None
        model, report = out
    else:
        t = time.monotonic()
        examples = _load(train_data)
        shards = shard_random(examples, cfg.p, cfg.shard_seed)
        load_time = time.monotonic() - t
        if cluster is None:
            if cfg.transport == "local":
                cluster = LocalCluster(cfg.p, cfg.fanout)
            elif cfg.transport == "tcp":
                cluster = TcpThreadCluster(cfg.p, cfg.fanout)
            else:
                raise ConfigurationError(f"unknown transport {cfg.transport!r}")

        def work(comm):
            return train_spmd(comm, shards[comm.rank], cfg, load_time, basis, len(examples),
                              cache_dir)

        model, report = cluster.run(work)[0]

    if test_data is not None:
        report.test_accuracy = evaluate(model, _load(test_data))
    return model, report


def decision_function(model: ModelState, examples: Sequence[SparseExample]) -> np.ndarray:
    d = max(model.basis.dim, n_features(examples))
    K = kernel_matrix(to_csr(examples, d), model.basis.with_dim(d), model.params.sigma)
    return K @ model.beta


def predict(model: ModelState, examples: Sequence[SparseExample]) -> np.ndarray:
    """Labels in {+1, -1}; a decision value of exactly 0 maps to +1."""
    if not np.all(np.isfinite(model.beta)):
        raise ValueError("model coefficients are not finite")
    return sign_labels(decision_function(model, examples))


def evaluate(model: ModelState, examples: Sequence[SparseExample]) -> float:
    y = np.array([e.label for e in examples])
    return float(np.mean(predict(model, examples) == y))


def bench(train_data, cfg: TrainConfig, ms: Sequence[int], test_data=None) -> list[dict]:
    """One training run per m; rows carry per-step times, objective and accuracy."""
    examples = _load(train_data)
    test = _load(test_data) if test_data is not None else None
    rows = []
    for m in ms:
        _, rep = train(examples, replace(cfg, m=int(m)), test)
        rows.append({
            "m": int(m),
            "step1": rep.step_times[1], "step2": rep.step_times[2],
            "step3": rep.step_times[3], "step4": rep.step_times[4],
            "kmeans_time": rep.kmeans_time,
            "tron_iters": rep.tron_trace.n_accepted,
            "objective": rep.final_objective,
            "test_accuracy": rep.test_accuracy,
        })
    return rows


__all__ = [
    "DistributedOracle", "PRESETS", "StepFailed", "TrainConfig", "TrainReport", "bench", "decision_function",
    "evaluate", "predict", "serve", "train", "train_spmd",
]
