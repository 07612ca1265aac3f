"""Experiment configuration: JSON document <-> validated dataclass."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

from .. import _jsonio
from ..covest import select_banding, select_dimension
from ..timeseries import DesignSpec, ErrorProcessSpec

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "default_config"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a Monte Carlo run depends on.

    Rules resolved per sample size n:

    * candidate sizes ``k_m = m * step`` for m = 1..M(n)
    * ``M(n) = ceil(C n^{1/(1+a)})`` (optionally capped by ``max``), with
      ``a`` a user-supplied lower bound on the bias decay exponent
    * working dimension ``d_n = c n^{1/4}`` rounded per ``dimension.rounding``
    * banding ``q_n`` from the exponential or algebraic rule
    """

    design: DesignSpec
    error_process: ErrorProcessSpec
    sample_sizes: tuple = (200, 400, 800, 1600)
    candidates: dict = field(default_factory=lambda: {"rule": "linear", "step": 1})
    model_count: dict = field(default_factory=lambda: {"constant": 1.0, "a": 1.5})
    N: int = 3
    delta: float = 0.05
    banding: dict = field(default_factory=lambda: {"mode": "exponential", "c4": 1.5})
    dimension: dict = field(default_factory=lambda: {"c": 1.0, "rounding": "round"})
    replications: int = 200
    base_seed: int = 20240101
    output: str = "results"
    burn_in: int | None = None
    covariance_override: str | None = None
    spectral_method: str = "lanczos"
    max_failure_rate: float = 0.05
    exclude_failed: bool = False
    tolerances: dict = field(default_factory=lambda: {
        "tie_tol": 0.0, "support_cap": 10**6, "d_floor_rel": 1e-8,
    })

    # -- rules ---------------------------------------------------------
    def model_count_for(self, n: int) -> int:
        C = float(self.model_count.get("constant", 1.0))
        a = float(self.model_count["a"])
        M = math.ceil(C * n ** (1.0 / (1.0 + a)) - 1e-12)
        cap = self.model_count.get("max")
        if cap is not None:
            M = min(M, int(cap))
        return max(1, M)

    def sizes_for(self, n: int) -> tuple:
        step = int(self.candidates.get("step", 1))
        return tuple(step * m for m in range(1, self.model_count_for(n) + 1))

    def dimension_for(self, n: int) -> int:
        return select_dimension(n, float(self.dimension.get("c", 1.0)),
                                self.dimension.get("rounding", "round"))

    def moment_S(self) -> float:
        dist = self.error_process.innovation_distribution
        if "S" in self.banding:
            return float(self.banding["S"])
        if dist["family"] == "student_t":
            return float(dist["df"]) - 1.0
        return math.inf

    def banding_for(self, n: int) -> int:
        mode = self.banding.get("mode", "exponential")
        if mode == "fixed":
            return int(self.banding["q"])
        if mode == "exponential":
            return select_banding(n, "exponential", c4=float(self.banding.get("c4", 1.5)))
        return select_banding(n, "algebraic", nu0=float(self.banding["nu0"]), S=self.moment_S())

    # -- validation ----------------------------------------------------
    def validate(self) -> ExperimentConfig:
        if not self.sample_sizes:
            raise ConfigError("sample_sizes is empty")
        if self.N < 1 or not 0 < self.delta < 1.0 / self.N:
            raise ConfigError(f"need N >= 1 and 0 < delta < 1/N (N={self.N}, delta={self.delta})")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if self.candidates.get("rule", "linear") != "linear":
            raise ConfigError(f"unknown candidate rule {self.candidates.get('rule')!r}")
        if "a" not in self.model_count:
            raise ConfigError("model_count.a (lower bound on the decay exponent) is required")
        if self.covariance_override not in (None, "identity", "exact"):
            raise ConfigError(f"unknown covariance_override {self.covariance_override!r}")
        if self.spectral_method not in ("power", "lanczos", "dense"):
            raise ConfigError(f"unknown spectral_method {self.spectral_method!r}")
        for n in self.sample_sizes:
            try:
                sizes = self.sizes_for(n)
                d = self.dimension_for(n)
                q = self.banding_for(n)
            except ValueError as exc:
                raise ConfigError(f"rules do not resolve at n={n}: {exc}") from exc
            if sizes[-1] >= n or sizes[-1] > self.design.j_max:
                raise ConfigError(
                    f"largest candidate size {sizes[-1]} at n={n} must be < n and <= j_max={self.design.j_max}"
                )
            if d > self.design.j_max or d >= n:
                raise ConfigError(f"working dimension {d} at n={n} is too large")
            if not 1 <= q or n < q + 10:
                raise ConfigError(f"banding parameter {q} at n={n} leaves too few observations")
        return self

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "design": self.design.to_dict(),
            "error_process": self.error_process.to_dict(),
            "sample_sizes": list(self.sample_sizes),
            "candidates": dict(self.candidates),
            "model_count": dict(self.model_count),
            "N": self.N,
            "delta": self.delta,
            "banding": dict(self.banding),
            "dimension": dict(self.dimension),
            "replications": self.replications,
            "base_seed": self.base_seed,
            "output": self.output,
            "burn_in": self.burn_in,
            "covariance_override": self.covariance_override,
            "spectral_method": self.spectral_method,
            "max_failure_rate": self.max_failure_rate,
            "exclude_failed": self.exclude_failed,
            "tolerances": dict(self.tolerances),
        }

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output")
        return hashlib.sha256(_jsonio.dumps(d, indent=None).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            kw = dict(d)
            kw["design"] = DesignSpec.from_dict(d["design"])
            kw["error_process"] = ErrorProcessSpec.from_dict(d["error_process"])
            if "sample_sizes" in kw:
                kw["sample_sizes"] = tuple(int(n) for n in kw["sample_sizes"])
            if "tolerances" in kw:
                tol = cls.__dataclass_fields__["tolerances"].default_factory()
                tol.update(kw["tolerances"])
                kw["tolerances"] = tol
            cfg = cls(**kw)
        except KeyError as exc:
            raise ConfigError(f"missing config key {exc}") from exc
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        return cfg.validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
    try:
        d = _jsonio.loads(text)
    except ValueError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return ExperimentConfig.from_dict(d)


def default_config(**overrides) -> ExperimentConfig:
    """AR(1) errors (rho = 0.5), theta_j = j^{-1.5}, N = 3, delta = 0.05."""
    kw = dict(
        design=DesignSpec({"kind": "power", "scale": 1.0, "exponent": 1.5}, j_max=200),
        error_process=ErrorProcessSpec.ar([-0.5]),
        dimension={"c": 1.0, "rounding": "ceil"},
    )
    kw.update(overrides)
    return ExperimentConfig(**kw).validate()
