"""Command line interface.

Exit codes: 0 success, 2 config error, 3 failure rate exceeded,
4 invariant-suite failure, 64 usage error (unknown flag or subcommand).
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .. import _jsonio
from ..averaging import amma, build_candidates, famma, minimize_over_HN
from ..covest import estimate_inverse, modified_cholesky, spectral_distance
from ..timeseries import ErrorProcessSpec, autocovariances, simulate_design, simulate_errors
from .checks import run_checks
from .config import ConfigError, ExperimentConfig, default_config, load_config
from .experiment import replication_seed, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FAILURE_RATE = 3
EXIT_INVARIANT = 4
EXIT_USAGE = 64

DATASET_FORMAT = "famma-dataset/1"

log = logging.getLogger("famma")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        d = cfg.to_dict()
        d["base_seed"] = args.seed
        cfg = ExperimentConfig.from_dict(d)
    return cfg


def _load_dataset(path) -> dict:
    path = Path(path)
    try:
        d = _jsonio.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc.strerror}") from exc
    except ValueError as exc:
        raise ConfigError(f"dataset {path} is not valid JSON: {exc}") from exc
    if d.get("format") != DATASET_FORMAT:
        raise ConfigError(f"dataset {path} is not a {DATASET_FORMAT} document")
    return d


def _emit(text: str, out) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8", newline="\n")
    else:
        sys.stdout.write(text)


# -- subcommands ------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _config(args)
    n = args.n or cfg.sample_sizes[0]
    seed = replication_seed(cfg.base_seed, n, 0)
    ss = np.random.SeedSequence(seed).generate_state(2, np.uint64)
    inst = simulate_design(cfg.design, n, int(ss[0]))
    e = simulate_errors(cfg.error_process, n, cfg.burn_in, int(ss[1]))
    Y = inst.mu + e
    if args.format == "csv":
        cols = ["y", "mu"] + [f"x{j + 1}" for j in range(inst.X.shape[1])]
        lines = [",".join(cols)]
        for t in range(n):
            row = [Y[t], inst.mu[t], *inst.X[t]]
            lines.append(",".join(_jsonio.fmt_float(v) for v in row))
        _emit("\n".join(lines) + "\n", args.out)
        return EXIT_OK
    doc = {
        "format": DATASET_FORMAT,
        "n": n,
        "seed": seed,
        "base_seed": cfg.base_seed,
        "design": cfg.design.to_dict(),
        "error_process": cfg.error_process.to_dict(),
        "theta": inst.theta,
        "theta_tail": inst.theta_tail,
        "y": Y,
        "mu": inst.mu,
        "X": inst.X,
    }
    _emit(_jsonio.dumps(doc) + "\n", args.out)
    return EXIT_OK


def _dataset_arrays(d):
    return np.asarray(d["X"], dtype=float), np.asarray(d["y"], dtype=float)


def _exact_inverse(d, n):
    if not d.get("error_process"):
        return None
    spec = ErrorProcessSpec.from_dict(d["error_process"])
    return modified_cholesky(autocovariances(spec, n - 1), n).inverse()


def cmd_estimate_cov(args) -> int:
    d = _load_dataset(args.data)
    cfg = _config(args)
    X, Y = _dataset_arrays(d)
    n = len(Y)
    dim = args.d or cfg.dimension_for(n)
    q = args.q or cfg.banding_for(n)
    est = estimate_inverse(Y, X, dim, q)
    out = est.to_dict()
    out["min_eigenvalue"] = float(np.linalg.eigvalsh(est.precision)[0])
    exact = _exact_inverse(d, n)
    if exact is not None:
        out["spectral_distance_to_exact"] = spectral_distance(est.precision, exact, method="lanczos")
    if args.format == "csv":
        if not args.out:
            raise ConfigError("--format csv writes the matrix to a file; pass --out")
        est.export_csv(args.out)
        Path(str(args.out) + ".json").write_text(_jsonio.dumps(out) + "\n", encoding="utf-8")
        return EXIT_OK
    _emit(_jsonio.dumps(out) + "\n", args.out)
    return EXIT_OK


def cmd_average(args) -> int:
    d = _load_dataset(args.data)
    cfg = _config(args)
    X, Y = _dataset_arrays(d)
    n = len(Y)
    sizes = cfg.sizes_for(n)
    dim, q = cfg.dimension_for(n), cfg.banding_for(n)
    opt = dict(support_cap=int(cfg.tolerances.get("support_cap", 10**6)),
               tie_tol=float(cfg.tolerances.get("tie_tol", 0.0)))
    est = estimate_inverse(Y, X, dim, q)
    fgls = build_candidates(X, Y, sizes, est.precision, "estimated")
    out = {"n": n, "sizes": list(sizes), "d": dim, "q": q, "N": cfg.N, "delta": cfg.delta}
    out["FAMMA"] = minimize_over_HN(famma(fgls, Y, est.precision), cfg.N, cfg.delta, **opt).to_dict()
    I = np.eye(n)
    ls = build_candidates(X, Y, sizes, I, "identity")
    out["MMA-LS"] = minimize_over_HN(famma(ls, Y, I), cfg.N, cfg.delta, **opt).to_dict()
    exact = _exact_inverse(d, n)
    if exact is not None:
        gls = build_candidates(X, Y, sizes, exact, "exact")
        out["AMMA"] = minimize_over_HN(amma(gls, Y, exact), cfg.N, cfg.delta, **opt).to_dict()
    _emit(_jsonio.dumps(out) + "\n", args.out)
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _config(args)
    out_dir = args.out or cfg.output
    t0 = time.perf_counter()
    res = run_experiment(cfg, threads=args.threads)
    paths = res.write(out_dir, "json" if args.format == "json" else "csv")
    log.info("experiment finished in %.1f s; wrote %s", time.perf_counter() - t0,
             ", ".join(str(p) for p in paths))
    for row in res.summary["per_n"]:
        r = row["ratio"]
        log.info("n=%d failures=%d median ratio AMMA=%.4f FAMMA=%.4f single=%.4f MMA-LS=%.4f "
                 "median spectral distance=%.4f", row["n"], row["failures"],
                 r["AMMA"]["median"], r["FAMMA"]["median"], r["AMMA-single"]["median"],
                 r["MMA-LS"]["median"], row["spectral_distance"]["median"])
    if res.failure_rate_exceeded:
        log.error("failure rate %.3f exceeds the configured maximum %.3f",
                  res.summary["failure_rate"], cfg.max_failure_rate)
        return EXIT_FAILURE_RATE
    return EXIT_OK


def cmd_check(args) -> int:
    results = run_checks()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_INVARIANT


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (defaults built in)")
    common.add_argument("--seed", type=int, help="override the base seed")
    common.add_argument("--threads", type=int, default=1, help="worker processes")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--format", choices=("csv", "json"), default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="famma", description="FGLS model averaging with banded Cholesky covariance estimates")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    s = sub.add_parser("simulate", parents=[common], help="emit a simulated dataset")
    s.add_argument("--n", type=int, help="sample size (default: first configured size)")
    s.set_defaults(func=cmd_simulate)
    s = sub.add_parser("estimate-cov", parents=[common], help="banded Cholesky estimate on a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--d", type=int, help="working dimension (default: config rule)")
    s.add_argument("--q", type=int, help="banding parameter (default: config rule)")
    s.set_defaults(func=cmd_estimate_cov)
    s = sub.add_parser("average", parents=[common], help="select averaging weights on a dataset")
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_average)
    s = sub.add_parser("experiment", parents=[common], help="run the Monte Carlo experiment")
    s.set_defaults(func=cmd_experiment)
    s = sub.add_parser("check", parents=[common], help="run the built-in invariant suite")
    s.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"famma: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
