"""GLS/FGLS model averaging over nested candidate models.

Candidate m regresses on the first k_m columns of X; all candidates share
one weighting matrix W (the exact inverse covariance or an estimate).
Weight-selection criteria are reduced to quadratics

    value(w) = w' Q w + b' w + c

and minimized exactly over the sparse weight set H_N: weights on at most N
models, each nonzero weight at least delta, summing to one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy import linalg

from .covest import RankDeficientError

__all__ = [
    "CandidateFits",
    "WeightVector",
    "QuadraticWeightCriterion",
    "OptimizationResult",
    "WhitenedDesign",
    "gls_fit",
    "build_candidates",
    "amma",
    "famma",
    "gse_loss",
    "risk_criterion",
    "conditional_risk",
    "single_model_risks",
    "minimize_over_HN",
    "grid_weights",
    "efficiency_ratio",
    "criterion_decomposition_check",
]

GRAM_COND_TOL = 1e-10
SYMMETRY_TOL = 1e-10
DEFAULT_N = 3
DEFAULT_DELTA = 0.05
DEFAULT_SUPPORT_CAP = 10**6
DEFAULT_GRID_CAP = 10**6


def _check_weight_matrix(W: np.ndarray, n: int) -> None:
    if W.shape != (n, n):
        raise ValueError(f"weighting matrix has shape {W.shape}, expected {(n, n)}")
    scale = max(1.0, float(np.max(np.abs(W))))
    if not np.allclose(W, W.T, rtol=0.0, atol=SYMMETRY_TOL * scale):
        raise ValueError("weighting matrix is not symmetric")
    try:
        linalg.cholesky(W, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("weighting matrix is not positive definite") from exc


def _check_gram(G: np.ndarray, what: str) -> None:
    lam = np.linalg.eigvalsh(G)
    if not lam[-1] > 0 or lam[0] <= GRAM_COND_TOL * lam[-1]:
        raise RankDeficientError(
            f"{what} is rank deficient under the weighting inner product "
            f"(eigenvalue ratio {lam[0] / lam[-1] if lam[-1] > 0 else 0:.3g})",
            columns=G.shape[0],
        )


def gls_fit(X_m, Y, W, check: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Generalized least squares fit of Y on the columns of X_m.

    Returns the fitted vector X_m theta_hat and theta_hat, where
    theta_hat = (X_m' W X_m)^{-1} X_m' W Y.
    """
    X_m = np.asarray(X_m, dtype=float)
    Y = np.asarray(Y, dtype=float)
    W = np.asarray(W, dtype=float)
    if X_m.ndim == 1:
        X_m = X_m[:, None]
    if check:
        _check_weight_matrix(W, len(Y))
    G = X_m.T @ (W @ X_m)
    _check_gram(G, f"design with {X_m.shape[1]} columns")
    theta = np.linalg.solve(G, X_m.T @ (W @ Y))
    return X_m @ theta, theta


@dataclass(frozen=True)
class CandidateFits:
    """Fitted vectors of nested GLS candidates sharing one weighting matrix.

    ``fitted[:, m]`` is P*_m Y. ``weighting`` records where W came from:
    ``"exact"``, ``"estimated"`` or ``"identity"``.
    """

    sizes: tuple
    X: np.ndarray
    W: np.ndarray
    gram: np.ndarray
    coefficients: tuple
    fitted: np.ndarray
    weighting: str = "exact"

    @property
    def M(self) -> int:
        return len(self.sizes)

    @property
    def k(self) -> np.ndarray:
        return np.asarray(self.sizes, dtype=float)

    def apply(self, v) -> np.ndarray:
        """n x M matrix whose column m is P*_m v."""
        v = np.asarray(v, dtype=float)
        r = self.X.T @ (self.W @ v)
        out = np.empty((len(v), self.M))
        for m, k in enumerate(self.sizes):
            out[:, m] = self.X[:, :k] @ np.linalg.solve(self.gram[:k, :k], r[:k])
        return out

    def projection(self, m: int) -> np.ndarray:
        """Dense P*_m = X_m (X_m' W X_m)^{-1} X_m' W; small n only."""
        k = self.sizes[m]
        Xm = self.X[:, :k]
        return Xm @ np.linalg.solve(self.gram[:k, :k], Xm.T @ self.W)

    def averaged(self, w) -> np.ndarray:
        return self.fitted @ np.asarray(w, dtype=float)


def build_candidates(
    X, Y, sizes, W, weighting: str = "exact", check: bool = True
) -> CandidateFits:
    """Fit the nested candidates k_1 < ... < k_M with one shared weighting matrix."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    W = np.asarray(W, dtype=float)
    sizes = tuple(int(k) for k in sizes)
    n = len(Y)
    if not sizes or sizes[0] < 1 or any(a >= b for a, b in zip(sizes, sizes[1:])):
        raise ValueError(f"model sizes must be strictly increasing positive integers, got {sizes}")
    if sizes[-1] >= n or sizes[-1] > X.shape[1]:
        raise ValueError(f"largest model size {sizes[-1]} must be < n={n} and <= columns of X")
    if check:
        _check_weight_matrix(W, n)
    XM = np.ascontiguousarray(X[:, : sizes[-1]])
    G = XM.T @ (W @ XM)
    r = XM.T @ (W @ Y)
    fitted = np.empty((n, len(sizes)))
    coefs = []
    for m, k in enumerate(sizes):
        try:
            _check_gram(G[:k, :k], f"model {m} (k={k})")
        except RankDeficientError as exc:
            exc.model_index = m
            raise
        theta = np.linalg.solve(G[:k, :k], r[:k])
        coefs.append(theta)
        fitted[:, m] = XM[:, :k] @ theta
    return CandidateFits(sizes, XM, W, G, tuple(coefs), fitted, weighting)


@dataclass(frozen=True)
class WeightVector:
    """A point of H_N: nonnegative, sums to one, at most N nonzero entries each >= delta."""

    values: np.ndarray
    N: int
    delta: float

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        nz = v[v != 0]
        if np.any(v < 0) or abs(math.fsum(v) - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to one")
        if len(nz) > self.N or np.any(nz < self.delta):
            raise ValueError(f"weights are outside H_N (N={self.N}, delta={self.delta})")

    @property
    def support(self) -> tuple:
        return tuple(int(i) for i in np.flatnonzero(self.values))

    def to_list(self) -> list:
        return [{"index": i, "value": float(self.values[i])} for i in self.support]


@dataclass(frozen=True)
class QuadraticWeightCriterion:
    """value(w) = w'Qw + b'w + c, tagged with the criterion it came from."""

    Q: np.ndarray
    b: np.ndarray
    c: float
    provenance: str
    fits_weighting: str | None = None

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or Q.shape[0] != len(self.b):
            raise ValueError("Q must be square and match b")
        object.__setattr__(self, "Q", 0.5 * (Q + Q.T))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float))
        object.__setattr__(self, "c", float(self.c))

    @property
    def M(self) -> int:
        return len(self.b)

    def value(self, w) -> float:
        w = np.asarray(w, dtype=float)
        return float(w @ self.Q @ w + self.b @ w + self.c)

    def values(self, W) -> np.ndarray:
        """Criterion at each row of W."""
        W = np.atleast_2d(np.asarray(W, dtype=float))
        return np.einsum("ij,jk,ik->i", W, self.Q, W) + W @ self.b + self.c

    def summary(self) -> dict:
        return {"provenance": self.provenance, "M": self.M, "c": self.c,
                "b": self.b.tolist(), "Q": self.Q.tolist()}


def _mallows_criterion(fits: CandidateFits, Y, Sinv, provenance: str) -> QuadraticWeightCriterion:
    Y = np.asarray(Y, dtype=float)
    Sinv = np.asarray(Sinv, dtype=float)
    F = fits.fitted
    if Sinv.shape != (len(Y), len(Y)) or F.shape[0] != len(Y):
        raise ValueError("dimension mismatch between fits, response and weighting matrix")
    if not np.array_equal(Sinv, fits.W):
        raise ValueError(f"{provenance} needs candidate fits built with the same weighting matrix")
    SF = Sinv @ F
    SY = Sinv @ Y
    Q = F.T @ SF
    b = -2 * (F.T @ SY) + 2 * fits.k
    c = Y @ SY
    return QuadraticWeightCriterion(Q, b, c, provenance, fits.weighting)


def amma(fits: CandidateFits, Y, Sinv) -> QuadraticWeightCriterion:
    """(Y - mu_hat(w))' Sigma^{-1} (Y - mu_hat(w)) + 2 sum_m w_m k_m with GLS fits."""
    return _mallows_criterion(fits, Y, Sinv, "AMMA")


def famma(fits: CandidateFits, Y, Sinv_hat) -> QuadraticWeightCriterion:
    """The feasible version: FGLS fits and estimated inverse covariance throughout."""
    return _mallows_criterion(fits, Y, Sinv_hat, "FAMMA")


def gse_loss(fits: CandidateFits, mu, Sinv) -> QuadraticWeightCriterion:
    """(mu_hat(w) - mu)' Sigma^{-1} (mu_hat(w) - mu) as a quadratic in w.

    ``Sinv`` is always the exact inverse covariance, also when ``fits`` are
    FGLS fits (the loss L^F); ``fits_weighting`` on the result says which.
    """
    mu = np.asarray(mu, dtype=float)
    Sinv = np.asarray(Sinv, dtype=float)
    if mu.shape[0] != fits.fitted.shape[0] or Sinv.shape != (len(mu), len(mu)):
        raise ValueError("dimension mismatch between fits, mean vector and weighting matrix")
    E = fits.fitted - mu[:, None]
    Q = E.T @ (Sinv @ E)
    return QuadraticWeightCriterion(Q, np.zeros(fits.M), 0.0, "GSE-loss", fits.weighting)


# ---------------------------------------------------------------------------
# conditional risk


@dataclass(frozen=True)
class WhitenedDesign:
    """Sigma^{-1/2} and the whitened nested column spaces for risk evaluation.

    Sigma^{-1/2} comes from a symmetric eigendecomposition with eigenvalues
    floored at ``floor_rel * lambda_max``.
    """

    inv_sqrt: np.ndarray

    @classmethod
    def from_covariance(cls, Sigma, floor_rel: float = 1e-12) -> WhitenedDesign:
        Sigma = np.asarray(Sigma, dtype=float)
        lam, V = np.linalg.eigh(0.5 * (Sigma + Sigma.T))
        if lam[0] <= 0:
            raise np.linalg.LinAlgError(f"covariance matrix is not positive definite (min eig {lam[0]:.3g})")
        lam = np.maximum(lam, floor_rel * lam[-1])
        return cls((V / np.sqrt(lam)) @ V.T)

    def bias_terms(self, mu, X, sizes) -> np.ndarray:
        """mu' Sigma^{-1/2} (I - P_m) Sigma^{-1/2} mu for every candidate m."""
        sizes = tuple(int(k) for k in sizes)
        Z = self.inv_sqrt @ np.asarray(X, dtype=float)[:, : sizes[-1]]
        v = self.inv_sqrt @ np.asarray(mu, dtype=float)
        Qz, _ = np.linalg.qr(Z)
        coef = Qz.T @ v
        out = np.empty(len(sizes))
        for m, k in enumerate(sizes):
            r = v - Qz[:, :k] @ coef[:k]
            out[m] = r @ r
        return out


def risk_criterion(mu, X, sizes, Sigma=None, whitened: WhitenedDesign | None = None):
    """The conditional risk R*(w) as a quadratic: Q_ml = bias_{max(m,l)} + min(k_m, k_l)."""
    if whitened is None:
        whitened = WhitenedDesign.from_covariance(Sigma)
    sizes = tuple(int(k) for k in sizes)
    bias = whitened.bias_terms(mu, X, sizes)
    idx = np.arange(len(sizes))
    hi = np.maximum.outer(idx, idx)
    k = np.asarray(sizes, dtype=float)
    Q = bias[hi] + np.minimum.outer(k, k)
    return QuadraticWeightCriterion(Q, np.zeros(len(sizes)), 0.0, "risk")


def conditional_risk(w, mu, X, sizes, Sigma=None, whitened: WhitenedDesign | None = None) -> float:
    """R*_n(w) = sum_m sum_l w_m w_l [mu' S^{-1/2} (I - P_max(m,l)) S^{-1/2} mu + min(k_m, k_l)]."""
    return risk_criterion(mu, X, sizes, Sigma, whitened).value(w)


def single_model_risks(mu, X, sizes, Sigma=None, whitened: WhitenedDesign | None = None):
    """D_n(m) = whitened squared bias + k_m for each candidate, and k*_n = min_m D_n(m)."""
    if whitened is None:
        whitened = WhitenedDesign.from_covariance(Sigma)
    D = whitened.bias_terms(mu, X, sizes) + np.asarray(sizes, dtype=float)
    return D, float(np.min(D))


# ---------------------------------------------------------------------------
# optimization over H_N


@dataclass(frozen=True)
class OptimizationResult:
    weights: WeightVector
    value: float
    supports_examined: int
    kkt_solves: int
    skipped_supports: int
    ties: bool
    approximate: bool = False
    solves_by_size: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.to_list(),
            "value": self.value,
            "supports_examined": self.supports_examined,
            "kkt_solves": self.kkt_solves,
            "skipped_supports": self.skipped_supports,
            "ties": self.ties,
            "approximate": self.approximate,
        }


def _solve_kkt_batch(K: np.ndarray, rhs: np.ndarray):
    """Solve stacked KKT systems; singular ones get a minimum-norm solve or are marked bad."""
    ok = np.ones(len(K), dtype=bool)
    try:
        sol = np.linalg.solve(K, rhs[..., None])[..., 0]
        res = np.abs(np.einsum("sij,sj->si", K, sol) - rhs).max(axis=1)
        scale = 1.0 + np.abs(rhs).max(axis=1) + np.abs(K).max(axis=(1, 2)) * np.abs(sol).max(axis=1)
        bad = ~(res <= 1e-9 * scale)
    except np.linalg.LinAlgError:
        sol = np.empty_like(rhs)
        bad = np.ones(len(K), dtype=bool)
    for s in np.flatnonzero(bad):
        x, *_ = np.linalg.lstsq(K[s], rhs[s], rcond=None)
        res = np.abs(K[s] @ x - rhs[s]).max()
        sol[s] = x
        ok[s] = res <= 1e-9 * (1.0 + np.abs(rhs[s]).max() + np.abs(K[s]).max() * np.abs(x).max())
    return sol, ok


def _optimize_supports(Q, b, c, supports: np.ndarray, delta: float):
    """Exact minimum of the quadratic on each support (rows of ``supports``).

    For each support every proper subset of coordinates is pinned at delta
    and the remaining equality-constrained problem is solved through its KKT
    system; the best feasible candidate is exact for a convex quadratic.

    Returns (values, weights on support, kkt solve count, solvable mask).
    """
    S, l = supports.shape
    Qs = Q[supports[:, :, None], supports[:, None, :]]
    bs = b[supports]
    best_val = np.full(S, np.inf)
    best_w = np.zeros((S, l))
    solvable = np.zeros(S, dtype=bool)
    solves = 0
    if l == 1:
        best_val = Qs[:, 0, 0] + bs[:, 0] + c
        return best_val, np.ones((S, 1)), S, np.ones(S, dtype=bool)
    for mask in range(2**l - 1):
        pinned = [i for i in range(l) if mask >> i & 1]
        free = [i for i in range(l) if not mask >> i & 1]
        f, p = len(free), len(pinned)
        if 1.0 - p * delta < f * delta:
            continue
        K = np.zeros((S, f + 1, f + 1))
        K[:, :f, :f] = 2.0 * Qs[:, free][:, :, free]
        K[:, :f, f] = 1.0
        K[:, f, :f] = 1.0
        rhs = np.zeros((S, f + 1))
        rhs[:, :f] = -bs[:, free]
        if p:
            rhs[:, :f] -= 2.0 * delta * Qs[:, free][:, :, pinned].sum(axis=2)
        rhs[:, f] = 1.0 - p * delta
        sol, ok = _solve_kkt_batch(K, rhs)
        solves += S
        solvable |= ok
        w = np.empty((S, l))
        w[:, free] = sol[:, :f]
        w[:, pinned] = delta
        feasible = ok & np.all(sol[:, :f] >= delta - 1e-12, axis=1)
        vals = np.einsum("si,sij,sj->s", w, Qs, w) + np.einsum("si,si->s", bs, w) + c
        better = feasible & (vals < best_val)
        best_val = np.where(better, vals, best_val)
        best_w[better] = w[better]
    return best_val, best_w, solves, solvable


def _polish(w_sup: np.ndarray, delta: float) -> np.ndarray:
    """Clip to >= delta and make the entries sum to one exactly."""
    w = np.maximum(w_sup, delta)
    j = int(np.argmax(w))
    rest = math.fsum(np.delete(w, j))
    w[j] = 1.0 - rest
    return w


def _finish(crit, M, N, delta, cands, examined, solves, skipped, approximate, by_size, tie_tol):
    if not cands:
        raise np.linalg.LinAlgError("every support gave a singular KKT system; no feasible weights")
    best = min(v for v, _, _ in cands)
    tol = tie_tol * max(1.0, abs(best))
    tied = [(sup, len(sup), w) for v, sup, w in cands if v - best <= tol]
    ties = len({t[0] for t in tied}) > 1
    sup, _, w_sup = min(tied, key=lambda t: (t[0], t[1]))
    w = np.zeros(M)
    w[list(sup)] = _polish(w_sup, delta)
    wv = WeightVector(w, N, delta)
    return OptimizationResult(wv, crit.value(wv.values), examined, solves, skipped, ties,
                              approximate, by_size)


def minimize_over_HN(
    crit: QuadraticWeightCriterion,
    N: int = DEFAULT_N,
    delta: float = DEFAULT_DELTA,
    support_cap: int = DEFAULT_SUPPORT_CAP,
    method: str = "exact",
    tie_tol: float = 1e-12,
) -> OptimizationResult:
    """Minimize a quadratic weight criterion over H_N.

    ``method="exact"`` enumerates all supports of size 1..N and solves each
    by active-set enumeration. Ties (values within ``tie_tol`` relative) go
    to the lexicographically smallest support, then the smallest support
    size. ``method="greedy"`` grows one support by forward selection and is
    approximate; it is required when the support count exceeds
    ``support_cap``.
    """
    M = crit.M
    if M < 1:
        raise ValueError("need at least one candidate model")
    if N < 1 or not 0 < delta < 1.0 / N:
        raise ValueError(f"need N >= 1 and 0 < delta < 1/N, got N={N}, delta={delta}")
    Q, b, c = crit.Q, crit.b, crit.c
    L = min(N, M)

    if method == "greedy":
        return _greedy(crit, N, delta, tie_tol)
    if method != "exact":
        raise ValueError(f"unknown method {method!r}")
    total = sum(math.comb(M, l) for l in range(1, L + 1))
    if total > support_cap:
        raise ValueError(
            f"{total} supports exceed the cap of {support_cap}; raise the cap or use method='greedy'"
        )
    cands, examined, solves, skipped, by_size = [], 0, 0, 0, {}
    for l in range(1, L + 1):
        supports = np.array(list(combinations(range(M), l)), dtype=np.intp)
        vals, ws, ns, solvable = _optimize_supports(Q, b, c, supports, delta)
        examined += len(supports)
        solves += ns
        by_size[l] = ns
        skipped += int(np.sum(~solvable))
        finite = np.isfinite(vals)
        if not np.any(finite):
            continue
        # only the near-best of each size can win; keep those for tie-breaking
        vmin = np.min(vals[finite])
        keep = np.flatnonzero(finite & (vals - vmin <= tie_tol * max(1.0, abs(vmin))))
        cands.extend((float(vals[s]), tuple(int(i) for i in supports[s]), ws[s]) for s in keep)
    return _finish(crit, M, N, delta, cands, examined, solves, skipped, False, by_size, tie_tol)


def _greedy(crit, N, delta, tie_tol):
    M = crit.M
    Q, b, c = crit.Q, crit.b, crit.c
    cands, examined, solves, skipped = [], 0, 0, 0
    current: tuple = ()
    for l in range(1, min(N, M) + 1):
        rest = [i for i in range(M) if i not in current]
        supports = np.array([sorted(current + (i,)) for i in rest], dtype=np.intp)
        vals, ws, ns, solvable = _optimize_supports(Q, b, c, supports, delta)
        examined += len(supports)
        solves += ns
        skipped += int(np.sum(~solvable))
        if not np.any(np.isfinite(vals)):
            break
        s = int(np.argmin(vals))
        current = tuple(int(i) for i in supports[s])
        cands.append((float(vals[s]), current, ws[s]))
    return _finish(crit, M, N, delta, cands, examined, solves, skipped, True, {}, tie_tol)


def grid_weights(M: int, N: int, cap: int = DEFAULT_GRID_CAP) -> np.ndarray:
    """All weight vectors with entries in {0, 1/N, ..., 1} summing to one (rows)."""
    if M < 1 or N < 1:
        raise ValueError("need M >= 1 and N >= 1")
    count = math.comb(N + M - 1, M - 1)
    if count > cap:
        raise ValueError(f"grid has {count} points, above the cap of {cap}")
    out = np.empty((count, M))
    for r, bars in enumerate(combinations(range(N + M - 1), M - 1)):
        edges = (-1,) + bars + (N + M - 1,)
        out[r] = [edges[i + 1] - edges[i] - 1 for i in range(M)]
    return out / N


def efficiency_ratio(numerator: float, denominator: float) -> float:
    """Loss at the selected weights over the infimum loss."""
    if not denominator > 0:
        raise ZeroDivisionError("infimum loss is zero; the efficiency ratio is undefined")
    return float(numerator) / float(denominator)


def criterion_decomposition_check(fits: CandidateFits, Y, mu, Sinv, w) -> float:
    """|(C*(w) - L*(w)) - (e'S e + 2 e'S (I - P*(w)) mu - 2 {e'S P*(w) e - sum w_m k_m})|.

    Both sides are evaluated directly from their definitions with S = Sinv
    and e = Y - mu.
    """
    Y = np.asarray(Y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    Sinv = np.asarray(Sinv, dtype=float)
    w = np.asarray(w, dtype=float)
    e = Y - mu
    fit_w = fits.averaged(w)
    penalty = float(w @ fits.k)
    r = Y - fit_w
    C = r @ Sinv @ r + 2 * penalty
    dl = fit_w - mu
    L = dl @ Sinv @ dl
    Pmu = fits.apply(mu) @ w
    Pe = fits.apply(e) @ w
    Se = Sinv @ e
    rhs = e @ Se + 2 * Se @ (mu - Pmu) - 2 * (Se @ Pe - penalty)
    return float(abs((C - L) - rhs))
