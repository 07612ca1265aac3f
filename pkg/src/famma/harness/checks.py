"""Built-in invariant suite run by ``famma check``.

Each check is small (seconds in total) and returns ``(name, passed, detail)``.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy import linalg

from ..averaging import (
    amma,
    build_candidates,
    criterion_decomposition_check,
    famma,
    grid_weights,
    minimize_over_HN,
    QuadraticWeightCriterion,
)
from ..covest import banded_population_inverse, modified_cholesky, spectral_distance
from ..timeseries import (
    ErrorProcessSpec,
    ar_from_ma,
    autocovariances,
    best_linear_predictor,
)


def _exact_banding():
    worst = 0.0
    for a in ([-0.5], [-0.5, 0.2]):
        spec = ErrorProcessSpec.ar(a)
        for n in (50, 200):
            acf = autocovariances(spec, n - 1)
            Sinv = np.linalg.inv(acf.toeplitz(n))
            for q in range(len(a), len(a) + 3):
                worst = max(worst, spectral_distance(banded_population_inverse(acf, n, q), Sinv))
    return worst < 1e-8, f"max distance {worst:.3g}"


def _cholesky_identity():
    specs = [ErrorProcessSpec.ar([-0.5]), ErrorProcessSpec.ma([0.5]),
             ErrorProcessSpec.arma([-0.5], [0.4])]
    worst = 0.0
    for spec in specs:
        acf = autocovariances(spec, 199)
        Sinv = np.linalg.inv(acf.toeplitz(200))
        # the difference is rounding noise with a flat spectrum; take the SVD
        worst = max(worst, spectral_distance(modified_cholesky(acf, 200).inverse(), Sinv, method="dense"))
    return worst < 1e-8, f"max distance {worst:.3g}"


def _levinson_vs_dense():
    acf = autocovariances(ErrorProcessSpec.arma([-0.6, 0.2], [0.3]), 30)
    worst = 0.0
    for k in (1, 5, 30):
        pc = best_linear_predictor(acf, k)
        R = linalg.toeplitz(acf.values[:k])
        dense = -np.linalg.solve(R, acf.values[1 : k + 1])
        worst = max(worst, np.max(np.abs(pc.coefficients - dense)))
    return worst < 1e-10, f"max coefficient gap {worst:.3g}"


def _ma_ar_roundtrip():
    spec = ErrorProcessSpec.ma([0.5, -0.3, 0.1])
    a = np.r_[1.0, ar_from_ma(spec, 200)]
    prod = np.convolve(a, np.r_[1.0, spec.ma_coefficients])[:201]
    err = np.max(np.abs(prod - np.r_[1.0, np.zeros(200)]))
    return err < 1e-10, f"max residual coefficient {err:.3g}"


def _instance(rng, n=80, M=4, rho=0.5):
    spec = ErrorProcessSpec.ar([-rho])
    Sinv = modified_cholesky(autocovariances(spec, n - 1), n).inverse()
    X = rng.standard_normal((n, M + 2))
    mu = X @ (np.arange(1, M + 3) ** -1.5) + 0.3 * rng.standard_normal(n)
    Y = mu + rng.standard_normal(n)
    return X, Y, mu, Sinv, tuple(range(1, M + 1))


def _decomposition():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(10):
        X, Y, mu, Sinv, sizes = _instance(rng)
        fits = build_candidates(X, Y, sizes, Sinv)
        C = amma(fits, Y, Sinv)
        w = rng.dirichlet(np.ones(len(sizes)))
        worst = max(worst, criterion_decomposition_check(fits, Y, mu, Sinv, w) / max(1.0, abs(C.value(w))))
    return worst < 1e-8, f"max relative residual {worst:.3g}"


def _optimizer_vs_grid():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(5):
        A = rng.standard_normal((4, 4))
        crit = QuadraticWeightCriterion(A @ A.T, rng.standard_normal(4), 0.0, "check")
        res = minimize_over_HN(crit, 2, 0.1)
        G = grid_weights(4, 100)
        nz = G != 0
        ok = (nz.sum(axis=1) <= 2) & np.all(~nz | (G >= 0.1 - 1e-12), axis=1)
        worst = max(worst, res.value - crit.values(G[ok]).min())
    return worst <= 1e-12, f"max optimizer excess over grid {worst:.3g}"


def _mma_reduction():
    rng = np.random.default_rng(3)
    X, Y, mu, _, sizes = _instance(rng)
    I = np.eye(len(Y))
    fits = build_candidates(X, Y, sizes, I, "identity")
    crit = famma(fits, Y, I)
    worst = 0.0
    for w in itertools.islice(grid_weights(len(sizes), 3), 20):
        r = Y - fits.fitted @ w
        worst = max(worst, abs(crit.value(w) - (r @ r + 2 * w @ fits.k)))
    return worst < 1e-8 * max(1.0, Y @ Y), f"max gap {worst:.3g}"


CHECKS = {
    "exact-banding": _exact_banding,
    "cholesky-identity": _cholesky_identity,
    "levinson-vs-dense": _levinson_vs_dense,
    "ma-ar-roundtrip": _ma_ar_roundtrip,
    "criterion-decomposition": _decomposition,
    "optimizer-vs-grid": _optimizer_vs_grid,
    "mma-reduction": _mma_reduction,
}


def run_checks() -> list[tuple[str, bool, str]]:
    out = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # noqa: BLE001
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out
