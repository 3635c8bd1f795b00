"""Trust-region Newton minimization with a Steihaug conjugate-gradient inner solver.

The minimizer only sees an oracle object with

* ``fun_grad(beta) -> (f, g)``: one fused function + gradient evaluation,
* ``hess_vec(d) -> H d``: Hessian-vector product at the last *accepted* point,
* ``accept()`` (optional): called when the last ``fun_grad`` point becomes
  the current iterate, so oracles that freeze state (e.g. an active set)
  can commit it.

The step-acceptance and radius-update rules are the usual TRON ones.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

logger = logging.getLogger(__name__)


class NumericalFailure(ArithmeticError):
    """Non-finite value during optimization; ``iterate`` holds the offending point."""

    def __init__(self, message: str, iterate=None):
        super().__init__(message)
        self.iterate = None if iterate is None else np.array(iterate, copy=True)


@dataclass(frozen=True)
class TronConfig:
    eps_rel: float = 1e-4
    max_iter: int = 1000
    cg_tol: float = 0.1
    cg_max: int | None = None  # None -> m
    eta0: float = 1e-4
    eta1: float = 0.25
    eta2: float = 0.75
    sigma1: float = 0.25
    sigma2: float = 0.5
    sigma3: float = 4.0
    delta0: float | None = None  # None -> ||g(beta0)||

    def __post_init__(self):
        if not 0 < self.eta0 <= self.eta1 < self.eta2 < 1:
            raise ValueError("need 0 < eta0 <= eta1 < eta2 < 1")
        if not 0 < self.sigma1 < self.sigma2 < 1 < self.sigma3:
            raise ValueError("need 0 < sigma1 < sigma2 < 1 < sigma3")
        if self.eps_rel < 0 or self.max_iter < 0 or self.cg_tol <= 0:
            raise ValueError("eps_rel, max_iter must be >= 0 and cg_tol > 0")


@dataclass
class IterRecord:
    iter: int
    f: float
    gnorm: float
    delta: float
    cg_steps: int
    accepted: bool
    cg_status: str = ""


@dataclass
class TronTrace:
    records: list = field(default_factory=list)
    n_fun_grad: int = 0
    n_hess_vec: int = 0
    f0: float = float("nan")
    gnorm0: float = float("nan")
    status: str = ""

    @property
    def n_accepted(self) -> int:
        return sum(r.accepted for r in self.records)

    @property
    def n_rejected(self) -> int:
        return len(self.records) - self.n_accepted

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "f", "gnorm", "delta", "cg_steps", "accepted"])
        for r in self.records:
            w.writerow([r.iter, repr(r.f), repr(r.gnorm), repr(r.delta), r.cg_steps, int(r.accepted)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "f0": self.f0,
            "gnorm0": self.gnorm0,
            "n_fun_grad": self.n_fun_grad,
            "n_hess_vec": self.n_hess_vec,
            "n_accepted": self.n_accepted,
            "n_rejected": self.n_rejected,
            "records": [vars(r) for r in self.records],
        }


def _boundary_tau(s, d, delta):
    """Positive tau with ||s + tau d|| = delta."""
    sd = s @ d
    dd = d @ d
    ss = s @ s
    rad = np.sqrt(max(sd * sd + dd * (delta * delta - ss), 0.0))
    if sd >= 0:
        return (delta * delta - ss) / (sd + rad)
    return (rad - sd) / dd


class CGResult(NamedTuple):
    step: np.ndarray
    status: str
    n_steps: int
    residual: np.ndarray  # -g - H step


def cg_steihaug(hess_vec, g, delta: float, cg_tol: float = 0.1,
                cg_max: int | None = None) -> CGResult:
    """Approximately minimize g's + s'Hs/2 subject to ||s|| <= delta.

    Status is one of ``"converged"`` (``||r|| <= cg_tol * ||g||``),
    ``"boundary"``, ``"neg_curvature"`` or ``"max_iter"``.
    """
    if not delta > 0:
        raise ValueError("trust radius must be positive")
    g = np.asarray(g, dtype=np.float64)
    if cg_max is None:
        cg_max = g.size
    s = np.zeros_like(g)
    r = -g
    d = r.copy()
    rr = r @ r
    tol = cg_tol * np.sqrt(rr)
    steps = 0
    while True:
        if np.sqrt(rr) <= tol:
            return CGResult(s, "converged", steps, r)
        if steps >= cg_max:
            return CGResult(s, "max_iter", steps, r)
        hd = np.asarray(hess_vec(d), dtype=np.float64)
        steps += 1
        dhd = d @ hd
        if not (np.isfinite(dhd) and np.all(np.isfinite(hd))):
            raise NumericalFailure("non-finite Hessian-vector product in CG", s)
        if dhd <= 0:
            tau = _boundary_tau(s, d, delta)
            return CGResult(s + tau * d, "neg_curvature", steps, r - tau * hd)
        alpha = rr / dhd
        s_next = s + alpha * d
        if np.linalg.norm(s_next) > delta:
            tau = _boundary_tau(s, d, delta)
            return CGResult(s + tau * d, "boundary", steps, r - tau * hd)
        s = s_next
        r = r - alpha * hd
        rr_new = r @ r
        d = r + (rr_new / rr) * d
        rr = rr_new


STALL_RTOL = 16 * np.finfo(np.float64).eps


def minimize(oracle, beta0, cfg: TronConfig | None = None):
    """Minimize via trust-region Newton. Returns ``(beta, trace)``.

    Stops when ``||g|| <= eps_rel * ||g(beta0)||`` or after ``max_iter``
    accepted iterations.
    """
    cfg = cfg or TronConfig()
    accept = getattr(oracle, "accept", lambda: None)
    beta = np.array(beta0, dtype=np.float64, copy=True)
    trace = TronTrace()

    def evaluate(x):
        f, g = oracle.fun_grad(x)
        trace.n_fun_grad += 1
        g = np.asarray(g, dtype=np.float64)
        if g.shape != x.shape:
            raise ValueError(f"gradient shape {g.shape} != iterate shape {x.shape}")
        if not (np.isfinite(f) and np.all(np.isfinite(g))):
            raise NumericalFailure(f"non-finite objective or gradient (f={f})", x)
        return float(f), g

    def hv(d):
        trace.n_hess_vec += 1
        return oracle.hess_vec(d)

    f, g = evaluate(beta)
    accept()
    gnorm0 = gnorm = float(np.linalg.norm(g))
    trace.f0, trace.gnorm0 = f, gnorm0
    delta = cfg.delta0 if cfg.delta0 is not None else gnorm0
    cg_max = cfg.cg_max if cfg.cg_max is not None else beta.size

    if gnorm <= cfg.eps_rel * gnorm0:
        trace.status = "converged"
        return beta, trace

    it = 0
    trace.status = "max_iter"
    while it < cfg.max_iter:
        s, cg_status, cg_steps, r = cg_steihaug(hv, g, delta, cfg.cg_tol, cg_max)
        gs = g @ s
        prered = -0.5 * (gs - s @ r)
        beta_new = beta + s
        fnew, gnew = evaluate(beta_new)
        actred = f - fnew
        snorm = float(np.linalg.norm(s))
        if it == 0:
            delta = min(delta, snorm)

        if fnew - f - gs <= 0:
            alpha = cfg.sigma3
        else:
            alpha = max(cfg.sigma1, -0.5 * (gs / (fnew - f - gs)))

        if actred < cfg.eta0 * prered:
            delta = min(max(alpha, cfg.sigma1) * snorm, cfg.sigma2 * delta)
        elif actred < cfg.eta1 * prered:
            delta = max(cfg.sigma1 * delta, min(alpha * snorm, cfg.sigma2 * delta))
        elif actred < cfg.eta2 * prered:
            delta = max(cfg.sigma1 * delta, min(alpha * snorm, cfg.sigma3 * delta))
        else:
            delta = max(delta, min(alpha * snorm, cfg.sigma3 * delta))

        accepted = actred > cfg.eta0 * prered and actred > 0
        if accepted:
            it += 1
            beta, f, g = beta_new, fnew, gnew
            gnorm = float(np.linalg.norm(g))
            accept()
        trace.records.append(IterRecord(it, float(f), gnorm, float(delta), cg_steps, accepted,
                                        cg_status))
        logger.debug("iter %d f=%.6e |g|=%.3e delta=%.3e cg=%d %s", it, f, gnorm, delta,
                     cg_steps, "acc" if accepted else "rej")

        if gnorm <= cfg.eps_rel * gnorm0:
            trace.status = "converged"
            break
        if prered <= 0 and actred <= 0:
            trace.status = "no_progress"
            break
        # changes this small are rounding noise in f; further steps cannot be judged
        if max(abs(actred), abs(prered)) <= STALL_RTOL * abs(f):
            trace.status = "stalled"
            break
        if delta <= 0:
            trace.status = "no_progress"
            break
    return beta, trace
