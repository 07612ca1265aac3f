"""Stationary linear error processes.

Simulation, exact autocovariances, MA/AR representation conversion and
finite-order best linear predictors (Levinson-Durbin) for errors of the form

    e_t = alpha_t + sum_{k=1}^K beta_k alpha_{t-k}.

Sign convention for autoregressive coefficients follows the prediction-error
form ``e_t + a_1 e_{t-1} + ... + a_p e_{t-p} = alpha_t``, so an AR(1) with
``e_t = 0.5 e_{t-1} + alpha_t`` has ``a_1 = -0.5``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg, signal, special

__all__ = [
    "NotInvertibleError",
    "IllConditionedError",
    "ErrorProcessSpec",
    "AutocovarianceTable",
    "PredictorCoefficients",
    "DesignSpec",
    "RegressionInstance",
    "simulate_errors",
    "autocovariances",
    "ar_from_ma",
    "levinson_durbin",
    "best_linear_predictor",
    "simulate_design",
]

DEFAULT_MA_TRUNCATION = 100
PD_CHECK_LAGS = 20
PD_CHECK_TOL = 1e-10
LEVINSON_COND_MAX = 1e12


class NotInvertibleError(ValueError):
    """The MA polynomial has a root on or inside the unit circle."""


class IllConditionedError(np.linalg.LinAlgError):
    """A Toeplitz segment is singular or too ill-conditioned to solve.

    ``order`` is the first predictor order at which the recursion broke down.
    """

    def __init__(self, msg: str, order: int):
        super().__init__(msg)
        self.order = order


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


def _ma_zeros_inside(coefs: np.ndarray) -> tuple[int, float]:
    """Zeros of ``sum_j coefs[j] z^j`` in the closed unit disc, by the argument principle.

    Returns (winding number, min modulus on the circle). Robust for long
    truncated MA polynomials where companion-matrix root finding is not.
    """
    L = max(4096, 8 * len(coefs))
    # fft evaluates at z = exp(-i lambda): the circle traversed clockwise
    vals = np.fft.fft(coefs, L)
    phase = np.unwrap(np.angle(np.append(vals, vals[0])))
    winding = -int(np.rint((phase[-1] - phase[0]) / (2 * np.pi)))
    return winding, float(np.min(np.abs(vals)))


def _invert_series(c: np.ndarray, J: int) -> np.ndarray:
    """Coefficients 1..J of ``(1 + sum_j c_j z^j)^{-1}`` (``c`` excludes the leading 1)."""
    K = len(c)
    out = np.zeros(J + 1)
    out[0] = 1.0
    for j in range(1, J + 1):
        m = min(j, K)
        out[j] = -np.dot(c[:m], out[j - 1 :: -1][:m])
    return out[1:]


@dataclass(frozen=True)
class ErrorProcessSpec:
    """A stationary linear process with innovation law.

    Parameters
    ----------
    ma_coefficients : array_like
        beta_1..beta_K; beta_0 = 1 is implicit.
    innovation_variance : float
        sigma^2_alpha > 0.
    innovation_distribution : dict
        ``{"family": "gaussian"}`` or ``{"family": "student_t", "df": nu}``.
    ar_form : array_like or None
        a_1..a_p when the process is exactly AR(p). Use :meth:`ar` to build
        such a spec; the MA coefficients are then the truncated inversion.
    """

    ma_coefficients: np.ndarray
    innovation_variance: float = 1.0
    innovation_distribution: dict = field(default_factory=lambda: {"family": "gaussian"})
    ar_form: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "ma_coefficients", _frozen(np.ravel(self.ma_coefficients)))
        if self.ar_form is not None:
            object.__setattr__(self, "ar_form", _frozen(np.ravel(self.ar_form)))
        dist = dict(self.innovation_distribution)
        object.__setattr__(self, "innovation_distribution", dist)

        if not np.all(np.isfinite(self.ma_coefficients)):
            raise ValueError("MA coefficients must be finite")
        if not self.innovation_variance > 0:
            raise ValueError("innovation_variance must be positive")
        family = dist.get("family")
        if family == "student_t":
            if not float(dist.get("df", 0)) > 2:
                raise ValueError("Student-t innovations need df > 2 for a finite variance")
        elif family != "gaussian":
            raise ValueError(f"unknown innovation family {family!r}")

        if self.ar_form is not None and len(self.ar_form):
            roots = np.roots(np.r_[1.0, self.ar_form])
            if np.max(np.abs(roots)) >= 1.0:
                raise ValueError(
                    f"AR form is not stationary (companion spectral radius "
                    f"{np.max(np.abs(roots)):.6g})"
                )

        winding, min_mod = _ma_zeros_inside(np.r_[1.0, self.ma_coefficients])
        tol = 1e-8 * (1.0 + np.sum(np.abs(self.ma_coefficients)))
        if winding != 0 or min_mod <= tol:
            raise NotInvertibleError(
                f"MA polynomial has {winding} zero(s) inside the unit disc "
                f"(min |beta(z)| on circle = {min_mod:.3g})"
            )

        gam = autocovariances(self, PD_CHECK_LAGS).values
        lam = np.linalg.eigvalsh(linalg.toeplitz(gam))
        if lam[0] <= PD_CHECK_TOL:
            raise ValueError(f"Toeplitz segment not positive definite (min eig {lam[0]:.3g})")

    # -- constructors -------------------------------------------------
    @classmethod
    def white_noise(cls, variance: float = 1.0, **kw) -> ErrorProcessSpec:
        return cls(np.zeros(0), variance, **kw)

    @classmethod
    def ma(cls, coefficients, variance: float = 1.0, **kw) -> ErrorProcessSpec:
        return cls(np.asarray(coefficients, dtype=float), variance, **kw)

    @classmethod
    def ar(
        cls, ar_coefficients, variance: float = 1.0, truncation: int = DEFAULT_MA_TRUNCATION, **kw
    ) -> ErrorProcessSpec:
        """AR(p) process ``e_t + sum a_j e_{t-j} = alpha_t`` with MA(inf) truncated at ``truncation``."""
        a = np.asarray(ar_coefficients, dtype=float)
        beta = _invert_series(a, truncation)
        return cls(beta, variance, ar_form=a, **kw)

    @classmethod
    def arma(
        cls, ar_coefficients, ma_coefficients, variance: float = 1.0,
        truncation: int = DEFAULT_MA_TRUNCATION, **kw,
    ) -> ErrorProcessSpec:
        """ARMA(p, q) via its truncated MA(inf) expansion."""
        a = np.asarray(ar_coefficients, dtype=float)
        b = np.r_[1.0, np.asarray(ma_coefficients, dtype=float)]
        psi = np.r_[1.0, _invert_series(a, truncation)]
        beta = np.convolve(psi, b)[1 : truncation + 1]
        return cls(beta, variance, **kw)

    # -- properties ----------------------------------------------------
    @property
    def truncation(self) -> int:
        return len(self.ma_coefficients)

    @property
    def ma_tail(self) -> float:
        """sum_{j>K} |beta_j| dropped by truncation (nonzero only for AR forms)."""
        if self.ar_form is None or not len(self.ar_form):
            return 0.0
        K = self.truncation
        ext = _invert_series(self.ar_form, 11 * K + 50)
        return float(np.sum(np.abs(ext[K:])))

    def spectral_density(self, lam) -> np.ndarray:
        """f_e(lambda) = sigma^2 / (2 pi) |sum_j beta_j exp(-i j lambda)|^2."""
        lam = np.asarray(lam, dtype=float)
        j = np.arange(self.truncation + 1)
        b = np.r_[1.0, self.ma_coefficients]
        tf = np.exp(-1j * np.multiply.outer(lam, j)) @ b
        return self.innovation_variance / (2 * np.pi) * np.abs(tf) ** 2

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "ma_coefficients": self.ma_coefficients.tolist(),
            "ar_form": None if self.ar_form is None else self.ar_form.tolist(),
            "innovation_variance": float(self.innovation_variance),
            "innovation_distribution": dict(self.innovation_distribution),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ErrorProcessSpec:
        """Build from a JSON document.

        ``ma_coefficients`` may be omitted when ``ar_form`` is given, in which
        case the MA(inf) expansion is truncated at ``truncation`` (default 100).
        """
        dist = d.get("innovation_distribution", {"family": "gaussian"})
        var = float(d.get("innovation_variance", 1.0))
        ar = d.get("ar_form")
        ma = d.get("ma_coefficients")
        if ma is None:
            if ar is None:
                return cls.white_noise(var, innovation_distribution=dist)
            return cls.ar(ar, var, truncation=int(d.get("truncation", DEFAULT_MA_TRUNCATION)),
                          innovation_distribution=dist)
        return cls(np.asarray(ma, dtype=float), var, dist,
                   None if ar is None else np.asarray(ar, dtype=float))


@dataclass(frozen=True)
class AutocovarianceTable:
    """gamma_0..gamma_L of a stationary process."""

    values: np.ndarray

    def __post_init__(self):
        v = _frozen(np.ravel(self.values))
        object.__setattr__(self, "values", v)
        if len(v) == 0 or not v[0] > 0:
            raise ValueError("gamma_0 must be positive")
        if np.any(np.abs(v) > v[0] * (1 + 1e-12)):
            raise ValueError("|gamma_j| exceeds gamma_0")

    @property
    def max_lag(self) -> int:
        return len(self.values) - 1

    def lags(self, n: int) -> np.ndarray:
        """gamma_0..gamma_{n-1}, zero-padded past the table's end."""
        out = np.zeros(n)
        m = min(n, len(self.values))
        out[:m] = self.values[:m]
        return out

    def toeplitz(self, n: int) -> np.ndarray:
        """The n x n covariance matrix Sigma_n."""
        return linalg.toeplitz(self.lags(n))


@dataclass(frozen=True)
class PredictorCoefficients:
    """Order-k best linear predictor: e_t + sum_j a_j(k) e_{t-j} has variance sigma2."""

    order: int
    coefficients: np.ndarray
    sigma2: float

    def __post_init__(self):
        object.__setattr__(self, "coefficients", _frozen(self.coefficients))
        if len(self.coefficients) != self.order:
            raise ValueError("coefficient count does not match order")
        if not self.sigma2 > 0:
            raise ValueError("prediction error variance must be positive")


def _innovations(spec: ErrorProcessSpec, size: int, rng: np.random.Generator) -> np.ndarray:
    dist = spec.innovation_distribution
    sd = np.sqrt(spec.innovation_variance)
    if dist["family"] == "gaussian":
        return sd * rng.standard_normal(size)
    nu = float(dist["df"])
    return sd * np.sqrt((nu - 2.0) / nu) * rng.standard_t(nu, size)


def simulate_errors(
    spec: ErrorProcessSpec, n: int, burn_in: int | None = None, seed: int = 0
) -> np.ndarray:
    """Simulate e_1..e_n.

    One block of ``burn_in + n`` innovations is drawn from
    ``numpy.random.default_rng(seed)`` and filtered; the last ``n`` filtered
    values are returned. AR specs are filtered recursively, MA specs by the
    truncated convolution.

    Parameters
    ----------
    spec : ErrorProcessSpec
    n : int
        Output length, n >= 1.
    burn_in : int, optional
        Discarded start-up values; defaults to 10 * K and must be >= K.
    seed : int
        Seed for the PCG64 generator.
    """
    K = spec.truncation
    if burn_in is None:
        burn_in = 10 * K
    if n < 1:
        raise ValueError("n must be >= 1")
    if burn_in < K:
        raise ValueError(f"burn_in={burn_in} is shorter than the MA truncation K={K}")
    dist = spec.innovation_distribution
    if dist["family"] == "student_t" and float(dist["df"]) <= 4:
        raise ValueError(
            f"Student-t innovations with df={dist['df']} lack the moments the "
            "averaging theory needs (df must exceed 4)"
        )
    rng = np.random.default_rng(seed)
    alpha = _innovations(spec, burn_in + n, rng)
    if spec.ar_form is not None:
        e = signal.lfilter([1.0], np.r_[1.0, spec.ar_form], alpha)
    elif K == 0:
        e = alpha
    else:
        e = signal.lfilter(np.r_[1.0, spec.ma_coefficients], [1.0], alpha)
    return np.ascontiguousarray(e[burn_in:])


def autocovariances(spec: ErrorProcessSpec, max_lag: int) -> AutocovarianceTable:
    """gamma_j = sigma^2 sum_i beta_i beta_{i+j} over the truncated MA coefficients."""
    if max_lag < 0:
        raise ValueError("max_lag must be >= 0")
    b = np.r_[1.0, spec.ma_coefficients]
    K = len(b) - 1
    full = np.correlate(b, b, mode="full")[K:]
    gam = np.zeros(max_lag + 1)
    m = min(max_lag + 1, K + 1)
    gam[:m] = full[:m]
    return AutocovarianceTable(spec.innovation_variance * gam)


def ar_from_ma(spec: ErrorProcessSpec, order: int) -> np.ndarray:
    """a_1..a_J of the AR(inf) form, by power-series inversion of 1 + sum beta_j z^j."""
    return _invert_series(spec.ma_coefficients, order)


def levinson_durbin(
    gamma, k: int, cond_max: float = LEVINSON_COND_MAX
) -> tuple[np.ndarray, np.ndarray]:
    """Predictor coefficients for every order 0..k.

    Returns
    -------
    coefs : ndarray, shape (k + 1, k)
        Row j holds a_1(j)..a_j(j) in its first j entries, zeros after.
    sigma2 : ndarray, shape (k + 1,)
        Prediction error variances; ``sigma2[0] = gamma_0``.

    Raises
    ------
    IllConditionedError
        When gamma_0 / sigma2_j exceeds ``cond_max`` (a lower bound on the
        condition number of the order-j Toeplitz segment).
    """
    g = np.asarray(gamma, dtype=float)
    if len(g) < k + 1:
        raise ValueError(f"need autocovariances through lag {k}, have {len(g) - 1}")
    coefs = np.zeros((k + 1, max(k, 1)))
    sigma2 = np.empty(k + 1)
    sigma2[0] = g[0]
    phi = np.zeros(0)  # AR coefficients, phi_j = -a_j
    for j in range(1, k + 1):
        kappa = (g[j] - np.dot(phi, g[j - 1 : 0 : -1])) / sigma2[j - 1]
        phi = np.r_[phi - kappa * phi[::-1], kappa]
        sigma2[j] = sigma2[j - 1] * (1.0 - kappa * kappa)
        if not (abs(kappa) < 1.0 and sigma2[j] > g[0] / cond_max):
            raise IllConditionedError(
                f"Toeplitz segment of order {j} is singular or ill-conditioned "
                f"(reflection {kappa:.6g}, prediction variance {sigma2[j]:.3g})",
                order=j,
            )
        coefs[j, :j] = -phi
    return coefs, sigma2


def best_linear_predictor(acf: AutocovarianceTable, k: int) -> PredictorCoefficients:
    """Solve the order-k Yule-Walker system by the Levinson-Durbin recursion."""
    if k < 1:
        raise ValueError("order must be >= 1")
    if acf.max_lag < k:
        raise ValueError(f"autocovariances cover lags 0..{acf.max_lag}, need 0..{k}")
    coefs, sigma2 = levinson_durbin(acf.values, k)
    return PredictorCoefficients(k, coefs[k, :k].copy(), float(sigma2[k]))


# ---------------------------------------------------------------------------
# regression designs


@dataclass(frozen=True)
class DesignSpec:
    """Coefficient and regressor law for y_t = sum_j theta_j x_tj + e_t.

    ``theta_law`` is ``{"kind": "power", "scale": c, "exponent": p}`` for
    theta_j = c j^{-p}, or ``{"kind": "explicit", "values": [...]}``.
    Regressors are i.i.d. standard normal unless ``regressor_fn`` is given;
    it receives ``(n, j_max, rng)`` and returns the n x j_max design.
    """

    theta_law: dict = field(default_factory=lambda: {"kind": "power", "scale": 1.0, "exponent": 1.5})
    j_max: int = 200
    intercept: bool = False
    regressor_fn: Callable | None = field(default=None, compare=False)

    def __post_init__(self):
        kind = self.theta_law.get("kind")
        if kind == "power":
            if not float(self.theta_law.get("exponent", 0)) > 1:
                raise ValueError("power-law theta needs exponent > 1 to be absolutely summable")
        elif kind == "explicit":
            vals = np.asarray(self.theta_law["values"], dtype=float)
            if not np.all(np.isfinite(vals)):
                raise ValueError("explicit theta values must be finite")
        else:
            raise ValueError(f"unknown theta law {kind!r}")
        if self.j_max < 1:
            raise ValueError("j_max must be >= 1")

    def theta(self) -> np.ndarray:
        law = self.theta_law
        if law["kind"] == "power":
            j = np.arange(1, self.j_max + 1, dtype=float)
            return float(law.get("scale", 1.0)) * j ** (-float(law["exponent"]))
        vals = np.asarray(law["values"], dtype=float)
        out = np.zeros(self.j_max)
        m = min(len(vals), self.j_max)
        out[:m] = vals[:m]
        return out

    def theta_tail(self) -> float:
        """sum_{j > j_max} |theta_j|."""
        law = self.theta_law
        if law["kind"] == "power":
            p = float(law["exponent"])
            return abs(float(law.get("scale", 1.0))) * float(special.zeta(p, self.j_max + 1))
        vals = np.asarray(law["values"], dtype=float)
        return float(np.sum(np.abs(vals[self.j_max :])))

    def to_dict(self) -> dict:
        return {"theta_law": dict(self.theta_law), "j_max": int(self.j_max),
                "intercept": bool(self.intercept)}

    @classmethod
    def from_dict(cls, d: dict) -> DesignSpec:
        return cls(dict(d["theta_law"]), int(d.get("j_max", 200)), bool(d.get("intercept", False)))


@dataclass(frozen=True)
class RegressionInstance:
    X: np.ndarray
    theta: np.ndarray
    mu: np.ndarray
    theta_tail: float
    Y: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def with_response(self, e: np.ndarray) -> RegressionInstance:
        e = np.asarray(e, dtype=float)
        if e.shape != self.mu.shape:
            raise ValueError("error vector length does not match the design")
        return RegressionInstance(self.X, self.theta, self.mu, self.theta_tail, self.mu + e)


def simulate_design(design: DesignSpec, n: int, seed: int = 0) -> RegressionInstance:
    """Draw X (n x j_max) and form mu = X theta."""
    rng = np.random.default_rng(seed)
    if design.regressor_fn is not None:
        X = np.asarray(design.regressor_fn(n, design.j_max, rng), dtype=float)
        if X.shape != (n, design.j_max):
            raise ValueError(f"regressor_fn returned shape {X.shape}, expected {(n, design.j_max)}")
    else:
        X = rng.standard_normal((n, design.j_max))
    if design.intercept:
        X[:, 0] = 1.0
    theta = design.theta()
    return RegressionInstance(X, theta, X @ theta, design.theta_tail())
