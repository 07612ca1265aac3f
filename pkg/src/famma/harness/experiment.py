"""Seeded Monte Carlo replications of the GLS/FGLS averaging pipeline.

Per-replication seeds come from ``numpy.random.SeedSequence([base_seed, n,
rep_index])``: the 64-bit replication seed is its first ``uint64`` state
word, and the design and error draws use the two words of
``SeedSequence(seed).generate_state(2, uint64)``. Adding replications or
sample sizes never changes existing ones.
"""

from __future__ import annotations

import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .. import _jsonio
from ..averaging import (
    WhitenedDesign,
    amma,
    build_candidates,
    efficiency_ratio,
    famma,
    gse_loss,
    minimize_over_HN,
    single_model_risks,
)
from ..covest import estimate_inverse, modified_cholesky, spectral_distance
from ..timeseries import autocovariances, simulate_design, simulate_errors
from .config import ExperimentConfig

__all__ = [
    "METHODS",
    "CSV_SCHEMA",
    "MethodOutcome",
    "ReplicationRecord",
    "replication_seed",
    "run_replication",
    "run_experiment",
    "ExperimentResult",
]

log = logging.getLogger(__name__)

METHODS = ("AMMA", "FAMMA", "AMMA-single", "MMA-LS")
CSV_SCHEMA = "famma-records/1"
CSV_COLUMNS = (
    "n", "rep", "seed", "method", "status", "stage", "M", "d", "q", "support", "weights",
    "criterion", "loss", "inf_loss", "ratio", "min_single_loss", "spectral_distance",
    "k_star", "d_floor",
)


def replication_seed(base_seed: int, n: int, rep: int) -> int:
    ss = np.random.SeedSequence([int(base_seed), int(n), int(rep)])
    return int(ss.generate_state(1, np.uint64)[0])


def _stream_seeds(seed: int) -> tuple[int, int]:
    s = np.random.SeedSequence(seed).generate_state(2, np.uint64)
    return int(s[0]), int(s[1])


@dataclass(frozen=True)
class MethodOutcome:
    weights: tuple
    criterion: float
    loss: float
    ratio: float


@dataclass
class ReplicationRecord:
    n: int
    rep: int
    seed: int
    M: int
    d: int
    q: int
    status: str = "ok"
    stage: str = ""
    error: str = ""
    methods: dict = field(default_factory=dict)
    inf_loss: float = math.nan
    min_single_loss: float = math.nan
    spectral_distance: float = math.nan
    k_star: float = math.nan
    d_floor: bool = False
    timing: float = 0.0

    @property
    def failed(self) -> bool:
        return self.status != "ok"

    def csv_rows(self) -> list[list[str]]:
        f = _jsonio.fmt_float
        rows = []
        for name in METHODS:
            out = self.methods.get(name)
            if out is None:
                support = weights = ""
                crit = loss = ratio = math.nan
            else:
                support = " ".join(str(i) for i, _ in out.weights)
                weights = " ".join(f(v) for _, v in out.weights)
                crit, loss, ratio = out.criterion, out.loss, out.ratio
            rows.append([
                str(self.n), str(self.rep), str(self.seed), name, self.status, self.stage,
                str(self.M), str(self.d), str(self.q), support, weights,
                f(crit), f(loss), f(self.inf_loss), f(ratio), f(self.min_single_loss),
                f(self.spectral_distance), f(self.k_star), "1" if self.d_floor else "0",
            ])
        return rows


class _SizeCache:
    """Exact covariance quantities shared by every replication at one n."""

    def __init__(self, config: ExperimentConfig, n: int):
        acf = autocovariances(config.error_process, n - 1)
        self.Sigma = acf.toeplitz(n)
        self.Sinv = modified_cholesky(acf, n).inverse()
        self.whitened = WhitenedDesign.from_covariance(self.Sigma)
        self.identity = np.eye(n)


_CACHE: dict = {}


def _cache_for(config: ExperimentConfig, n: int) -> _SizeCache:
    key = (config.config_hash(), n)
    if key not in _CACHE:
        _CACHE.clear()
        _CACHE[key] = _SizeCache(config, n)
    return _CACHE[key]


def _weights_tuple(res) -> tuple:
    return tuple((i, float(res.weights.values[i])) for i in res.weights.support)


def run_replication(config: ExperimentConfig, n: int, rep: int) -> ReplicationRecord:
    """One full pass: simulate, fit GLS and FGLS candidates, select weights, score losses.

    Any stage failure is caught and recorded with its stage tag.
    """
    t0 = time.perf_counter()
    seed = replication_seed(config.base_seed, n, rep)
    sizes = config.sizes_for(n)
    rec = ReplicationRecord(n=n, rep=rep, seed=seed, M=len(sizes),
                            d=config.dimension_for(n), q=config.banding_for(n))
    N, delta = config.N, config.delta
    tol = config.tolerances
    opt = dict(support_cap=int(tol.get("support_cap", 10**6)), tie_tol=float(tol.get("tie_tol", 0.0)))
    stage = "exact_covariance"
    try:
        cache = _cache_for(config, n)
        Sinv = cache.Sinv

        stage = "simulate"
        sd, se = _stream_seeds(seed)
        inst = simulate_design(config.design, n, sd)
        e = simulate_errors(config.error_process, n, config.burn_in, se)
        X, mu = inst.X, inst.mu
        Y = mu + e

        stage = "gls"
        gls = build_candidates(X, Y, sizes, Sinv, "exact", check=False)
        loss = gse_loss(gls, mu, Sinv)
        best = minimize_over_HN(loss, N, delta, **opt)
        rec.inf_loss = best.value
        rec.min_single_loss = float(min(loss.value(np.eye(len(sizes))[m]) for m in range(len(sizes))))
        _, rec.k_star = single_model_risks(mu, X, sizes, whitened=cache.whitened)

        stage = "amma"
        c_amma = amma(gls, Y, Sinv)
        for name, NN in (("AMMA", N), ("AMMA-single", 1)):
            sel = minimize_over_HN(c_amma, NN, delta, **opt)
            num = loss.value(sel.weights.values)
            rec.methods[name] = MethodOutcome(_weights_tuple(sel), sel.value, num,
                                              efficiency_ratio(num, rec.inf_loss))

        stage = "covariance_estimate"
        if config.covariance_override == "identity":
            Sinv_hat, weighting = cache.identity, "identity"
        elif config.covariance_override == "exact":
            Sinv_hat, weighting = Sinv, "exact"
        else:
            est = estimate_inverse(Y, X, rec.d, rec.q,
                                   floor_rel=float(tol.get("d_floor_rel", 1e-8)))
            Sinv_hat, weighting = est.precision, "estimated"
            rec.d_floor = est.floored
        rec.spectral_distance = spectral_distance(Sinv_hat, Sinv, method=config.spectral_method)

        stage = "famma"
        fgls = build_candidates(X, Y, sizes, Sinv_hat, weighting, check=False)
        sel = minimize_over_HN(famma(fgls, Y, Sinv_hat), N, delta, **opt)
        num = gse_loss(fgls, mu, Sinv).value(sel.weights.values)
        rec.methods["FAMMA"] = MethodOutcome(_weights_tuple(sel), sel.value, num,
                                             efficiency_ratio(num, rec.inf_loss))

        stage = "mma_ls"
        ls = build_candidates(X, Y, sizes, cache.identity, "identity", check=False)
        sel = minimize_over_HN(famma(ls, Y, cache.identity), N, delta, **opt)
        num = gse_loss(ls, mu, Sinv).value(sel.weights.values)
        rec.methods["MMA-LS"] = MethodOutcome(_weights_tuple(sel), sel.value, num,
                                              efficiency_ratio(num, rec.inf_loss))
        rec.stage = ""
    except Exception as exc:  # noqa: BLE001 - every failure is recorded, none dropped
        rec.status = "failed"
        rec.stage = stage
        rec.error = f"{type(exc).__name__}: {exc}"
        log.warning("replication n=%d rep=%d failed at %s: %s", n, rep, stage, rec.error)
    rec.timing = time.perf_counter() - t0
    return rec


# ---------------------------------------------------------------------------
# experiments

_WORKER_CONFIG: ExperimentConfig | None = None


def _init_worker(config: ExperimentConfig) -> None:
    global _WORKER_CONFIG
    _WORKER_CONFIG = config
    threadpool_limits(1)


def _worker(task):
    n, rep = task
    return run_replication(_WORKER_CONFIG, n, rep)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list
    summary: dict

    @property
    def failure_rate_exceeded(self) -> bool:
        return bool(self.summary["failure_rate_exceeded"])

    def records_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# {CSV_SCHEMA} config={self.summary['config_hash']}\n")
        buf.write(",".join(CSV_COLUMNS) + "\n")
        for rec in self.records:
            for row in rec.csv_rows():
                buf.write(",".join(row) + "\n")
        return buf.getvalue()

    def summary_json(self) -> str:
        return _jsonio.dumps(self.summary) + "\n"

    def write(self, out_dir, fmt: str = "csv") -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        if fmt in ("csv", "both"):
            p = out / "records.csv"
            p.write_text(self.records_csv(), encoding="utf-8", newline="\n")
            paths.append(p)
        if fmt in ("json", "both"):
            p = out / "records.json"
            p.write_text(_jsonio.dumps([_record_dict(r) for r in self.records]) + "\n",
                         encoding="utf-8", newline="\n")
            paths.append(p)
        p = out / "summary.json"
        p.write_text(self.summary_json(), encoding="utf-8", newline="\n")
        paths.append(p)
        return paths


def _record_dict(rec: ReplicationRecord) -> dict:
    return {
        "n": rec.n, "rep": rec.rep, "seed": rec.seed, "M": rec.M, "d": rec.d, "q": rec.q,
        "status": rec.status, "stage": rec.stage, "error": rec.error,
        "inf_loss": rec.inf_loss, "min_single_loss": rec.min_single_loss,
        "spectral_distance": rec.spectral_distance, "k_star": rec.k_star, "d_floor": rec.d_floor,
        "methods": {
            name: {"weights": [{"index": i, "value": v} for i, v in out.weights],
                   "criterion": out.criterion, "loss": out.loss, "ratio": out.ratio}
            for name, out in rec.methods.items()
        },
    }


def _quantiles(x) -> dict:
    x = np.asarray(x, dtype=float)
    if len(x) == 0 or np.any(np.isnan(x)):
        return {"median": math.nan, "q25": math.nan, "q75": math.nan, "mean": math.nan}
    q25, med, q75 = np.quantile(x, [0.25, 0.5, 0.75])
    return {"median": float(med), "q25": float(q25), "q75": float(q75), "mean": float(np.mean(x))}


def summarize(config: ExperimentConfig, records: list) -> dict:
    per_n = []
    total_failed = 0
    for n in config.sample_sizes:
        recs = [r for r in records if r.n == n]
        failed = [r for r in recs if r.failed]
        total_failed += len(failed)
        used = [r for r in recs if not r.failed] if config.exclude_failed else recs

        def col(get):
            return [get(r) if not r.failed else math.nan for r in used]

        methods = {
            name: _quantiles(col(lambda r, name=name: r.methods[name].ratio)) for name in METHODS
        }
        ok = [r for r in recs if not r.failed]
        per_n.append({
            "n": n,
            "M": len(config.sizes_for(n)),
            "d": config.dimension_for(n),
            "q": config.banding_for(n),
            "replications": len(recs),
            "failures": len(failed),
            "failed_stages": sorted({r.stage for r in failed}),
            "ratio": methods,
            "spectral_distance": _quantiles(col(lambda r: r.spectral_distance)),
            "k_star": _quantiles(col(lambda r: r.k_star)),
            "amma_ratio_ge_1": sum(r.methods["AMMA"].ratio >= 1.0 for r in ok),
            "inclusion_violations": sum(r.inf_loss > r.min_single_loss for r in ok),
        })
    total = len(records)
    rate = total_failed / total if total else 0.0
    return {
        "schema": "famma-summary/1",
        "config_hash": config.config_hash(),
        "replications": config.replications,
        "failures": total_failed,
        "failure_rate": rate,
        "failure_rate_exceeded": rate > config.max_failure_rate,
        "per_n": per_n,
    }


def run_experiment(config: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    """Run every (n, replication) task and reduce deterministically.

    ``threads > 1`` fans replications out over that many worker processes;
    records are sorted by (n, rep) before summarizing, so output bytes do not
    depend on the worker count.
    """
    tasks = [(n, rep) for n in config.sample_sizes for rep in range(config.replications)]
    if threads <= 1:
        with threadpool_limits(1):
            records = [run_replication(config, n, rep) for n, rep in tasks]
    else:
        with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker,
                                 initargs=(config,)) as pool:
            chunk = max(1, config.replications // threads)
            records = list(pool.map(_worker, tasks, chunksize=chunk))
    records.sort(key=lambda r: (r.n, r.rep))
    return ExperimentResult(config, records, summarize(config, records))
