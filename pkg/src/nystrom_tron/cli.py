"""Command-line entry point: ``nystrom-tron {train,predict,evaluate,approx-error,bench}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys

import numpy as np

from .basis import load_basis, save_basis
from .data import ConfigurationError, ParseError, load_dataset, make_rng, to_csr
from .driver import PRESETS, StepFailed, TrainConfig, bench, evaluate, predict, train
from .kernel import kernel_matrix
from .objective import LOSSES, load_model, save_model
from .allreduce import parse_hosts
from .reference import approx_error, nystrom_reconstruct, pseudo_inverse
from .tron import TronConfig

log = logging.getLogger("nystrom_tron")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _sweep(text: str) -> list[int]:
    key, _, vals = text.partition("=")
    if key.strip() != "m" or not vals:
        raise argparse.ArgumentTypeError("only m sweeps are supported: --sweep m=100,200,...")
    return _int_list(vals)


def _add_train_options(ap: argparse.ArgumentParser, need_m: bool = True) -> None:
    ap.add_argument("--data", required=True, help="training set, libsvm format (optionally gzipped)")
    ap.add_argument("--test", help="test set; its accuracy goes into the report")
    ap.add_argument("--preset", choices=sorted(PRESETS), help="named lambda/sigma defaults")
    ap.add_argument("--lambda", dest="lam", type=float)
    ap.add_argument("--sigma", type=float)
    if need_m:
        ap.add_argument("-m", type=int, help="number of basis points")
        ap.add_argument("--stages", type=_int_list, help="stage-wise sizes, e.g. 100,200,400")
    ap.add_argument("--basis", default="random", choices=["random", "kmeans", "auto"])
    ap.add_argument("--basis-file", help="use these basis points instead of selecting them")
    ap.add_argument("--kmeans-iters", type=int, default=3)
    ap.add_argument("-p", type=int, default=1, help="number of workers")
    ap.add_argument("--fanout", type=int, default=2)
    ap.add_argument("--transport", default="local", choices=["local", "tcp"])
    ap.add_argument("--hosts", help="host:port per line in rank order (tcp only)")
    ap.add_argument("--rank", type=int, help="run only this worker (tcp with --hosts)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--loss", default="squared_hinge", choices=LOSSES)
    ap.add_argument("--eps", type=float, default=1e-4, help="relative gradient tolerance")
    ap.add_argument("--max-iter", type=int, default=1000)
    ap.add_argument("--cache-dir", help="reuse kernel blocks cached here")


def _config(args, m) -> TrainConfig:
    lam, sigma = args.lam, args.sigma
    if args.preset:
        pre = PRESETS[args.preset]
        lam = pre.lam if lam is None else lam
        sigma = pre.sigma if sigma is None else sigma
    if lam is None or sigma is None:
        raise ConfigurationError("give --lambda and --sigma, or a --preset")
    if args.hosts and args.transport != "tcp":
        raise ConfigurationError("--hosts needs --transport tcp")
    return TrainConfig(
        lam=lam, sigma=sigma, m=m, basis_policy=args.basis, p=args.p, fanout=args.fanout,
        transport=args.transport, shard_seed=args.seed, basis_seed=args.seed,
        kmeans_iters=args.kmeans_iters, loss=args.loss,
        tron=TronConfig(eps_rel=args.eps, max_iter=args.max_iter),
    )


def _hosts(args):
    if not args.hosts:
        if args.rank is not None:
            raise ConfigurationError("--rank needs --hosts")
        return None
    with open(args.hosts, encoding="utf-8") as fh:
        return parse_hosts(fh.read())


def cmd_train(args) -> int:
    basis = None
    if args.basis_file:
        basis, _ = load_basis(args.basis_file)
    if args.stages:
        m = args.stages
    elif args.m is not None:
        m = args.m
    elif basis is not None:
        m = basis.m
    else:
        raise ConfigurationError("give -m or --stages")
    cfg = _config(args, m)
    out = train(args.data, cfg, args.test, basis=basis, hosts=_hosts(args), rank=args.rank,
                cache_dir=args.cache_dir)
    if out is None:  # a non-master rank
        return 0
    model, report = out
    if args.model:
        save_model(args.model, model)
    if args.save_basis:
        save_basis(args.save_basis, model.basis, args.seed)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            fh.write(report.tron_trace.to_csv())
    text = report.to_json(indent=2)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    tr = report.tron_trace
    print(f"objective {report.final_objective:.10g}  iterations {tr.n_accepted}  "
          f"status {tr.status}")
    if report.test_accuracy is not None:
        print(f"test accuracy {report.test_accuracy:.4f}")
    return 0


def cmd_predict(args) -> int:
    model = load_model(args.model)
    labels = predict(model, load_dataset(args.data))
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.writelines(f"{int(v)}\n" for v in labels)
    return 0


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    print(f"{evaluate(model, load_dataset(args.data)):.6f}")
    return 0


def approx_error_rows(examples, sigma: float, ms, seed: int = 0, max_n: int = 2000,
                      method: str = "lapack") -> list[dict]:
    """Relative Nystrom errors for nested random bases (prefixes of one permutation)."""
    rng = make_rng(seed)
    if len(examples) > max_n:
        examples = [examples[i] for i in np.sort(rng.choice(len(examples), max_n, replace=False))]
    n = len(examples)
    if max(ms) > n:
        raise ConfigurationError(f"m={max(ms)} exceeds the {n} points used")
    X = to_csr(examples)
    K = kernel_matrix(X, X, sigma)
    order = rng.permutation(n)
    rows = []
    for m in ms:
        idx = order[:m]
        C, W = K[:, idx], K[np.ix_(idx, idx)]
        err = approx_error(K, nystrom_reconstruct(C, pseudo_inverse(W, method=method)), method)
        rows.append({"m": m, "frobenius_rel": err.frobenius_rel, "spectral_rel": err.spectral_rel})
    return rows


def _write_csv(rows, fields, out) -> None:
    fh = open(out, "w", newline="", encoding="utf-8") if out else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    finally:
        if out:
            fh.close()


def cmd_approx_error(args) -> int:
    rows = approx_error_rows(load_dataset(args.data), args.sigma, args.m, args.seed,
                             args.max_n, args.eig)
    _write_csv(rows, ["m", "frobenius_rel", "spectral_rel"], args.out)
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args, args.sweep[0])
    rows = bench(args.data, cfg, args.sweep, args.test)
    fields = ["m", "step1", "step2", "step3", "step4", "kmeans_time", "tron_iters",
              "objective", "test_accuracy"]
    _write_csv(rows, fields, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nystrom-tron",
                                 description="Distributed Nystrom kernel machines trained by TRON.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    _add_train_options(t)
    t.add_argument("--report", help="write the JSON run report here")
    t.add_argument("--model", help="write the model checkpoint here")
    t.add_argument("--trace", help="write the TRON iteration trace (CSV) here")
    t.add_argument("--save-basis", help="write the basis points here")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="write one predicted label per line")
    pr.add_argument("--model", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    ev = sub.add_parser("evaluate", help="print the accuracy of a model on a data set")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True)
    ev.set_defaults(func=cmd_evaluate)

    ae = sub.add_parser("approx-error", help="Nystrom approximation error vs m (CSV)")
    ae.add_argument("--data", required=True)
    ae.add_argument("--sigma", type=float, required=True)
    ae.add_argument("-m", type=_int_list, required=True, help="comma-separated sizes")
    ae.add_argument("--seed", type=int, default=0)
    ae.add_argument("--max-n", type=int, default=2000, help="subsample larger data to this size")
    ae.add_argument("--eig", default="lapack", choices=["lapack", "jacobi"])
    ae.add_argument("--out", help="CSV file (default stdout)")
    ae.set_defaults(func=cmd_approx_error)

    b = sub.add_parser("bench", help="per-step timings and accuracy over an m sweep (CSV)")
    _add_train_options(b, need_m=False)
    b.add_argument("--sweep", type=_sweep, required=True, help="m=100,200,...")
    b.add_argument("--out", help="CSV file (default stdout)")
    b.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, ParseError, OSError, StepFailed) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
