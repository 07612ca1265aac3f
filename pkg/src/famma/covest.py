"""Inverse covariance matrices through (banded) modified Cholesky factors.

For a stationary error vector with covariance Sigma_n,

    Sigma_n^{-1} = T' D^{-1} T,

where row i of the unit lower-triangular T holds the order-(i-1) predictor
coefficients and D the matching prediction error variances. Keeping only q
subdiagonals gives the banded approximation; plugging in least-squares AR
fits on regression residuals gives the feasible estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.linalg import svds

from . import _jsonio
from .timeseries import AutocovarianceTable, PredictorCoefficients, levinson_durbin

__all__ = [
    "RankDeficientError",
    "SingularGramError",
    "ConvergenceError",
    "CholeskyFactors",
    "BandedInverseEstimate",
    "modified_cholesky",
    "banded_population_inverse",
    "ls_residuals",
    "fit_residual_ar",
    "estimate_inverse",
    "select_banding",
    "select_dimension",
    "spectral_distance",
]

RANK_TOL = 1e-10
D_FLOOR_REL = 1e-8


class RankDeficientError(np.linalg.LinAlgError):
    def __init__(self, msg: str, columns: int):
        super().__init__(msg)
        self.columns = columns


class SingularGramError(np.linalg.LinAlgError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, msg: str, last_value: float, last_vector: np.ndarray):
        super().__init__(msg)
        self.last_value = last_value
        self.last_vector = last_vector


def _assemble(T: np.ndarray, D: np.ndarray, bandwidth: int | None = None) -> np.ndarray:
    """Dense symmetric T' D^{-1} T."""
    n = len(D)
    if bandwidth is not None and bandwidth < n // 4:
        Ts = sparse.csr_matrix(T)
        A = (Ts.T @ sparse.diags(1.0 / D) @ Ts).toarray()
    else:
        A = (T.T / D) @ T
    return 0.5 * (A + A.T)


def _band_factor(coefs: np.ndarray, sigma2: np.ndarray, n: int, q: int):
    """T(q), D(q) from predictor rows ``coefs[k, :k]`` for k = 0..q."""
    T = np.eye(n)
    for r in range(1, min(q, n)):
        T[r, r - 1 :: -1] = coefs[r, :r]
    if q < n:
        rows = np.arange(q, n)
        for j in range(1, q + 1):
            T[rows, rows - j] = coefs[q, j - 1]
    D = np.empty(n)
    m = min(q + 1, n)
    D[:m] = sigma2[:m]
    D[m:] = sigma2[q]
    return T, D


@dataclass(frozen=True)
class CholeskyFactors:
    """Unit lower-triangular T and positive diagonal D with Sigma^{-1} = T' D^{-1} T."""

    T: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        T, D = self.T, self.D
        if T.shape != (len(D), len(D)):
            raise ValueError("T and D dimensions disagree")
        if np.any(np.diag(T) != 1.0) or np.any(np.triu(T, 1) != 0.0):
            raise ValueError("T must be unit lower triangular")
        if np.any(D <= 0):
            raise ValueError("D entries must be positive")

    @property
    def n(self) -> int:
        return len(self.D)

    def inverse(self) -> np.ndarray:
        return _assemble(self.T, self.D)


def modified_cholesky(acf: AutocovarianceTable, n: int) -> CholeskyFactors:
    """Full modified Cholesky factors of Sigma_n^{-1} from exact autocovariances."""
    if acf.max_lag < n - 1:
        raise ValueError(f"need autocovariances through lag {n - 1}, have {acf.max_lag}")
    coefs, sigma2 = levinson_durbin(acf.values[:n], n - 1)
    T, D = _band_factor(coefs, sigma2, n, n - 1)
    return CholeskyFactors(T, D)


def banded_population_inverse(acf: AutocovarianceTable, n: int, q: int) -> np.ndarray:
    """Sigma_n^{-1}(q): rows beyond q reuse the order-q predictor."""
    if not 1 <= q < n:
        raise ValueError(f"banding parameter must satisfy 1 <= q < n, got q={q}, n={n}")
    coefs, sigma2 = levinson_durbin(acf.lags(q + 1), q)
    T, D = _band_factor(coefs, sigma2, n, q)
    return _assemble(T, D, bandwidth=q)


def ls_residuals(Y, X, d: int, rank_tol: float = RANK_TOL) -> np.ndarray:
    """Residuals of Y after least squares on the first ``d`` columns of X."""
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X, dtype=float)
    n = len(Y)
    if d < 1:
        raise ValueError("working dimension d must be >= 1")
    if d > n or d > X.shape[1]:
        raise ValueError(f"working dimension d={d} exceeds n={n} or the number of columns")
    Q, R, _ = linalg.qr(X[:, :d], mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > rank_tol * diag[0])) if diag[0] > 0 else 0
    if rank < d:
        raise RankDeficientError(
            f"first {d} columns of X have numerical rank {rank}", columns=d
        )
    return Y - Q @ (Q.T @ Y)


def _lag_matrix(e: np.ndarray, k: int, start: int, stop: int) -> np.ndarray:
    return np.column_stack([e[start - j : stop - j] for j in range(1, k + 1)])


def fit_residual_ar(
    residuals, k: int, q: int, window: tuple[int, int] | None = None
) -> tuple[PredictorCoefficients, float]:
    """Least-squares AR(k) fit of residuals over a window shared by all orders.

    The criterion is sum_t (e_t + c_1 e_{t-1} + ... + c_k e_{t-k})^2 with t
    ranging over ``window`` (0-based, half-open). The default window
    ``(q, n)`` is observations q+1..n in 1-based terms for every k <= q.

    Returns
    -------
    PredictorCoefficients
        a_hat(k) and sigma_hat^2_k, the mean squared fit residual over the window.
    float
        gamma_hat_0 = mean of e_t^2 over all n observations.
    """
    e = np.asarray(residuals, dtype=float)
    n = len(e)
    if not 1 <= k <= q < n:
        raise ValueError(f"need 1 <= k <= q < n, got k={k}, q={q}, n={n}")
    if n < q + 10:
        raise ValueError(f"need at least q + 10 = {q + 10} observations, have {n}")
    start, stop = (q, n) if window is None else window
    if start < k or stop > n or stop - start < k + 1:
        raise ValueError(f"window {(start, stop)} is incompatible with order {k}")
    gamma0 = float(np.dot(e, e) / n)
    y = e[start:stop]
    L = _lag_matrix(e, k, start, stop)
    Q, R, piv = linalg.qr(L, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if not diag[0] > 0 or np.any(diag < RANK_TOL * diag[0]):
        raise SingularGramError(f"lagged residual matrix of order {k} is rank deficient")
    c = np.empty(k)
    c[piv] = -linalg.solve_triangular(R, Q.T @ y)
    fit = y + L @ c
    sigma2 = float(np.dot(fit, fit) / (stop - start))
    if sigma2 <= 1e-14 * max(gamma0, np.finfo(float).tiny):
        raise SingularGramError(f"residuals are perfectly predictable at order {k}")
    return PredictorCoefficients(k, c, sigma2), gamma0


@dataclass(frozen=True)
class BandedInverseEstimate:
    """Plug-in estimate T_hat(q)' D_hat(q)^{-1} T_hat(q) and its ingredients."""

    n: int
    q: int
    d: int
    T: np.ndarray
    D: np.ndarray
    precision: np.ndarray
    gamma0: float
    sigma2: np.ndarray
    ar_rows: tuple
    floor_active: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def floored(self) -> bool:
        return bool(np.any(self.floor_active))

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "q": self.q,
            "d": self.d,
            "gamma0": self.gamma0,
            "sigma2": self.sigma2.tolist(),
            "ar_rows": [np.asarray(r).tolist() for r in self.ar_rows],
            "floor_active": [bool(f) for f in self.floor_active],
        }

    def to_json(self) -> str:
        return _jsonio.dumps(self.to_dict())

    def export_csv(self, path) -> None:
        _jsonio.write_matrix_csv(path, self.precision)


def estimate_inverse(
    Y, X, d: int, q: int, window: tuple[int, int] | None = None,
    floor_rel: float = D_FLOOR_REL,
) -> BandedInverseEstimate:
    """Feasible banded Cholesky estimate of Sigma_n^{-1}.

    Residuals from least squares on the first ``d`` columns feed AR fits of
    orders 1..q; those fill the band of T_hat(q) and the diagonal D_hat(q).
    Entries of D_hat below ``floor_rel * gamma_hat_0`` are raised to that
    floor and flagged in ``floor_active``.
    """
    Y = np.asarray(Y, dtype=float)
    n = len(Y)
    if not 1 <= q < n:
        raise ValueError(f"banding parameter must satisfy 1 <= q < n, got q={q}")
    e = ls_residuals(Y, X, d)
    coefs = np.zeros((q + 1, q))
    s2 = np.empty(q + 1)
    rows = []
    gamma0 = None
    for k in range(1, q + 1):
        pc, gamma0 = fit_residual_ar(e, k, q, window)
        coefs[k, :k] = pc.coefficients
        s2[k] = pc.sigma2
        rows.append(pc.coefficients)
    s2[0] = gamma0
    floor = floor_rel * gamma0
    active = s2 < floor
    s2 = np.where(active, floor, s2)
    T, D = _band_factor(coefs, s2, n, q)
    return BandedInverseEstimate(
        n=n, q=q, d=d, T=T, D=D, precision=_assemble(T, D, bandwidth=q),
        gamma0=float(gamma0), sigma2=s2[1:].copy(), ar_rows=tuple(rows), floor_active=active,
    )


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def select_banding(
    n: int, mode: str = "exponential", c4: float = 1.5, nu0: float | None = None,
    S: float = math.inf,
) -> int:
    """Banding parameter q_n.

    ``exponential``: max(1, round(c4 log n)).
    ``algebraic``: floor(n^{1 / (2 (1 + 2/S + nu0))}) with nu0 >= 1/3.
    """
    if n < 20:
        raise ValueError("select_banding needs n >= 20")
    if mode == "exponential":
        if not c4 > 0:
            raise ValueError("c4 must be positive")
        return max(1, _round_half_up(c4 * math.log(n)))
    if mode == "algebraic":
        if nu0 is None or nu0 < 1.0 / 3.0:
            raise ValueError("algebraic decay needs a lower limit nu0 >= 1/3")
        expo = 1.0 / (2.0 * (1.0 + 2.0 / S + nu0))
        # guard exact powers against rounding just below an integer
        return max(1, int(math.floor(n ** expo * (1 + 1e-12))))
    raise ValueError(f"unknown banding mode {mode!r}")


def select_dimension(n: int, c: float = 1.0, rounding: str = "round") -> int:
    """Working dimension d_n = max(1, round(c n^{1/4})); ``rounding='ceil'`` uses the ceiling."""
    if not c > 0:
        raise ValueError("c must be positive")
    x = c * n ** 0.25
    if rounding == "ceil":
        return max(1, int(math.ceil(x - 1e-12)))
    return max(1, _round_half_up(x))


def _start_vector(n: int) -> np.ndarray:
    v = np.ones(n) + 0.1 * np.sin(np.arange(1, n + 1) * 1.618033988749895)
    return v / np.linalg.norm(v)


def _symmetric_norm(E: np.ndarray) -> float:
    """max |eigenvalue| of a symmetric matrix, exploiting an exact band when there is one."""
    n = E.shape[0]
    i, j = np.nonzero(np.tril(E))
    b = int(np.max(i - j)) if len(i) else 0
    if b < n // 4:
        ab = np.zeros((b + 1, n))
        for r in range(b + 1):
            ab[r, : n - r] = np.diagonal(E, -r)
        lo = linalg.eigvals_banded(ab, lower=True, select="i", select_range=(0, 0))
        hi = linalg.eigvals_banded(ab, lower=True, select="i", select_range=(n - 1, n - 1))
        return float(max(abs(lo[0]), abs(hi[0])))
    lam = np.linalg.eigvalsh(E)
    return float(max(abs(lam[0]), abs(lam[-1])))


def spectral_distance(
    A, B, method: str = "power", rtol: float = 1e-9, max_iter: int = 100_000
) -> float:
    """Largest singular value of A - B.

    ``power`` runs power iteration on (A-B)'(A-B) from a fixed start vector
    and stops when the estimated error of the Rayleigh quotient drops below
    ``rtol``. ``lanczos`` is the practical choice for large n: symmetric
    differences go to a LAPACK eigensolver (the banded one when A - B has
    exact zeros outside a narrow band), other matrices to ARPACK from the
    same start vector. ``dense`` takes a full SVD.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape or A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"need equal square matrices, got {A.shape} and {B.shape}")
    E = A - B
    n = E.shape[0]
    if not np.any(E):
        return 0.0
    if method == "dense" or (method == "lanczos" and n < 3):
        return float(np.linalg.norm(E, 2))
    if method == "lanczos":
        if np.array_equal(E, E.T):
            return _symmetric_norm(E)
        s = svds(sparse.csr_matrix(E) if np.count_nonzero(E) < 0.1 * E.size else E,
                 k=1, v0=_start_vector(n), tol=1e-13, return_singular_vectors=False)
        return float(s[0])
    if method != "power":
        raise ValueError(f"unknown method {method!r}")
    v0 = _start_vector(n)
    if np.count_nonzero(E) < 0.1 * E.size:
        # banded differences: sparse matvecs
        E = sparse.csr_matrix(E)

    v = v0
    rho_prev = None
    diff_prev = None
    for _ in range(max_iter):
        u = E @ v
        rho = float(np.dot(u, u))
        w = E.T @ u
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return math.sqrt(rho)
        v = w / nw
        if rho_prev is not None:
            diff = abs(rho - rho_prev)
            if diff <= rtol * rho:
                r = diff / diff_prev if diff_prev else 0.0
                est = diff * r / (1.0 - r) if r < 1.0 else math.inf
                if est <= rtol * rho or diff == 0.0:
                    return math.sqrt(rho)
            diff_prev = diff
        rho_prev = rho
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} iterations",
        last_value=math.sqrt(rho_prev), last_vector=v,
    )
