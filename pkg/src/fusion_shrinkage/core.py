"""Shared types, the weighted quadratic loss and input validation.

The loss matrix ``D`` is never built explicitly.  It is diagonal with entries
``d_k / K``, so every quadratic form reduces to a weighted sum over strata.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np

WEIGHT_SUM_ATOL = 1e-10


class ValidationError(ValueError):
    """Raised when inputs violate a type invariant.

    ``violations`` holds every problem found, not only the first one.
    """

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DegenerateInputError(ValueError):
    """Raised when an estimator's shrinkage factor is undefined for the data."""


def _as_vector(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise ValidationError([f"{name} must be one-dimensional, got shape {arr.shape}"])
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class WeightedLossSpec:
    """Stratum importance weights ``d_k`` (positive, summing to one)."""

    d: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "d", _as_vector(self.d, "d"))
        problems = _weight_violations(self.d)
        if problems:
            raise ValidationError(problems)

    @property
    def K(self) -> int:
        return int(self.d.shape[0])

    @property
    def diag(self) -> np.ndarray:
        """Diagonal of the loss matrix, ``d_k / K``."""
        return self.d / self.K

    @classmethod
    def uniform(cls, K: int) -> "WeightedLossSpec":
        return cls(np.full(K, 1.0 / K))

    @classmethod
    def normalized(cls, raw) -> "WeightedLossSpec":
        """Build weights proportional to ``raw``; the only place rescaling happens."""
        raw = np.asarray(raw, dtype=float)
        total = raw.sum()
        if not np.isfinite(total) or total <= 0:
            raise ValidationError([f"cannot normalize weights with total {total}"])
        return cls(raw / total)


def _weight_violations(d: np.ndarray) -> List[str]:
    out = []
    if d.shape[0] < 1:
        out.append("K must be at least 1")
        return out
    if not np.all(np.isfinite(d)):
        out.append("weights must be finite")
        return out
    for k in np.flatnonzero(d <= 0):
        out.append(f"nonpositive weight at index {k}")
    total = float(d.sum())
    if abs(total - 1.0) > WEIGHT_SUM_ATOL:
        out.append(f"weights sum {total:.12g} ≠ 1")
    return out


@dataclass(frozen=True)
class FusionInput:
    """An experimental and an observational estimate of the same K-vector.

    Attributes:
        tau_r: Unbiased (RCT) stratum estimates.
        tau_o: Possibly biased observational stratum estimates.
        sigma_r2: Variances of ``tau_r`` (diagonal of its covariance).
        weights: Loss weights.
        sigma_o2: Optional variances of ``tau_o``.
    """

    tau_r: np.ndarray
    tau_o: np.ndarray
    sigma_r2: np.ndarray
    weights: WeightedLossSpec
    sigma_o2: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("tau_r", "tau_o", "sigma_r2"):
            object.__setattr__(self, name, _as_vector(getattr(self, name), name))
        if self.sigma_o2 is not None:
            object.__setattr__(self, "sigma_o2", _as_vector(self.sigma_o2, "sigma_o2"))
        if not isinstance(self.weights, WeightedLossSpec):
            object.__setattr__(self, "weights", WeightedLossSpec(self.weights))
        problems = fusion_violations(self)
        if problems:
            raise ValidationError(problems)

    @property
    def K(self) -> int:
        return self.weights.K

    @property
    def delta(self) -> np.ndarray:
        """``tau_o - tau_r``."""
        return self.tau_o - self.tau_r

    def replace(self, **changes) -> "FusionInput":
        fields = dict(
            tau_r=self.tau_r,
            tau_o=self.tau_o,
            sigma_r2=self.sigma_r2,
            weights=self.weights,
            sigma_o2=self.sigma_o2,
        )
        fields.update(changes)
        return FusionInput(**fields)

    def to_dict(self) -> Dict[str, Any]:
        out = {
            "tau_r": self.tau_r.tolist(),
            "tau_o": self.tau_o.tolist(),
            "sigma_r2": self.sigma_r2.tolist(),
            "d": self.weights.d.tolist(),
        }
        if self.sigma_o2 is not None:
            out["sigma_o2"] = self.sigma_o2.tolist()
        return out

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "FusionInput":
        problems = []
        for key in ("tau_r", "tau_o", "sigma_r2", "d"):
            if key not in obj:
                problems.append(f"missing key {key!r}")
        if problems:
            raise ValidationError(problems)
        arrays = {}
        for key in ("tau_r", "tau_o", "sigma_r2", "d", "sigma_o2"):
            if key not in obj or obj[key] is None:
                continue
            try:
                arr = np.asarray(obj[key], dtype=float)
            except (TypeError, ValueError):
                problems.append(f"{key} must be an array of numbers")
                continue
            if arr.ndim != 1:
                problems.append(f"{key} must be a flat array")
            elif not np.all(np.isfinite(arr)):
                problems.append(f"{key} contains non-finite values")
            arrays[key] = arr
        if problems:
            raise ValidationError(problems)
        validate_arrays(**arrays)
        return cls(
            tau_r=arrays["tau_r"],
            tau_o=arrays["tau_o"],
            sigma_r2=arrays["sigma_r2"],
            weights=WeightedLossSpec(arrays["d"]),
            sigma_o2=arrays.get("sigma_o2"),
        )

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_json(cls, path) -> "FusionInput":
        return cls.from_dict(json.loads(Path(path).read_text()))


def validate_arrays(tau_r, tau_o, sigma_r2, d, sigma_o2=None) -> None:
    """Check raw arrays against the FusionInput invariants, reporting all violations."""
    d = np.asarray(d, dtype=float)
    problems = _weight_violations(d) if d.ndim == 1 else ["d must be one-dimensional"]
    K = d.shape[0] if d.ndim == 1 else None
    named = {"tau_r": tau_r, "tau_o": tau_o, "sigma_r2": sigma_r2}
    if sigma_o2 is not None:
        named["sigma_o2"] = sigma_o2
    for name, values in named.items():
        arr = np.asarray(values, dtype=float)
        if K is not None and arr.shape != (K,):
            problems.append(f"{name} has length {arr.size}, expected {K}")
    sr = np.asarray(sigma_r2, dtype=float).ravel()
    for k in np.flatnonzero(~(sr > 0)):
        problems.append(f"nonpositive RCT variance at index {k}")
    if sigma_o2 is not None:
        so = np.asarray(sigma_o2, dtype=float).ravel()
        for k in np.flatnonzero(~(so >= 0)):
            problems.append(f"negative observational variance at index {k}")
    if problems:
        raise ValidationError(problems)


def fusion_violations(inp: FusionInput) -> List[str]:
    try:
        validate_arrays(inp.tau_r, inp.tau_o, inp.sigma_r2, inp.weights.d, inp.sigma_o2)
    except ValidationError as exc:
        return exc.violations
    return []


def validate_fusion_input(inp: FusionInput) -> None:
    """Re-check a FusionInput; raises ValidationError listing every violation."""
    problems = fusion_violations(inp)
    if problems:
        raise ValidationError(problems)


@dataclass(frozen=True)
class ShrinkageOutput:
    """A fused estimate ``(1 - f) * tau_r + f * tau_o`` with per-stratum ``f``.

    ``factors`` is the weight placed on ``tau_o``.  It lies in [0, 1] for the
    positive-part estimators; the unrestricted ones may leave that interval.
    """

    estimate: np.ndarray
    factors: np.ndarray
    method: str
    diagnostics: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "estimate": np.asarray(self.estimate).tolist(),
            "factors": np.asarray(self.factors).tolist(),
            "diagnostics": {k: _jsonable(v) for k, v in self.diagnostics.items()},
        }


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def blend(inp: FusionInput, factors, method: str, **diagnostics) -> ShrinkageOutput:
    """Combine the two estimates with weight ``factors`` on ``tau_o``."""
    f = np.broadcast_to(np.asarray(factors, dtype=float), inp.tau_r.shape).copy()
    estimate = inp.tau_r + f * (inp.tau_o - inp.tau_r)
    return ShrinkageOutput(estimate=estimate, factors=f, method=method, diagnostics=diagnostics)


@dataclass(frozen=True)
class OracleSpec:
    """True bias ``xi`` and variances of the observational estimate."""

    xi: np.ndarray
    sigma_o2: np.ndarray

    def __post_init__(self):
        xi = _as_vector(self.xi, "xi")
        so = _as_vector(self.sigma_o2, "sigma_o2")
        problems = []
        if xi.shape != so.shape:
            problems.append(f"xi has length {xi.size} but sigma_o2 has length {so.size}")
        if np.any(so < 0):
            problems.append("sigma_o2 must be nonnegative")
        if problems:
            raise ValidationError(problems)
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "sigma_o2", so)


def weighted_loss(tau_hat, tau, weights: WeightedLossSpec) -> float:
    """``(1/K) * sum_k d_k (tau_hat_k - tau_k)^2``."""
    tau_hat = np.asarray(tau_hat, dtype=float)
    tau = np.asarray(tau, dtype=float)
    K = weights.K
    problems = []
    if tau_hat.shape != (K,):
        problems.append(f"tau_hat has length {tau_hat.size}, expected {K}")
    if tau.shape != (K,):
        problems.append(f"tau has length {tau.size}, expected {K}")
    if problems:
        raise ValidationError(problems)
    resid = tau_hat - tau
    return float(np.dot(weights.diag, resid * resid))
