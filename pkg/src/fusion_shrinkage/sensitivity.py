"""Marginal sensitivity analysis for the SIPW observational estimate.

Under the marginal sensitivity model the true odds of treatment differ from
the estimated odds by at most a factor ``gamma``.  For a treated unit this
confines the inverse-probability weight ``1/pi`` to
``[1 + (1/p_hat - 1)/gamma, 1 + gamma*(1/p_hat - 1)]``; controls are
analogous with ``1 - p_hat``.  The extreme SIPW contrasts over that box are
attained at threshold assignments (all low weights on one side of an outcome
cut), so each arm is solved exactly by scanning the ``n + 1`` cuts.

Worst-case bias and bootstrap variance of the extrema are then plugged into
the oracle shrinkage weight to obtain ``lambda(gamma)``, a confounding-level
driven alternative to the data-driven common factor.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .causal import StratifiedDataset, estimate_propensity
from .core import FusionInput, ShrinkageOutput, ValidationError, blend
from .shrinkage import lambda1_plus


@dataclass(frozen=True)
class SensitivityConfig:
    gamma: float = 1.0
    bootstrap_B: int = 200
    seed: int = 0
    epsilon: float = 1e-4
    gamma_max: float = 10.0
    bias_weight: str = "loss"
    stratify_bootstrap: bool = False
    max_iter: int = 200

    def __post_init__(self):
        problems = []
        if not self.gamma >= 1:
            problems.append(f"gamma must be >= 1, got {self.gamma}")
        if not self.epsilon > 0:
            problems.append(f"epsilon must be positive, got {self.epsilon}")
        if not self.gamma_max > 1:
            problems.append(f"gamma_max must exceed 1, got {self.gamma_max}")
        if self.bootstrap_B < 2:
            problems.append(f"bootstrap_B must be at least 2, got {self.bootstrap_B}")
        if self.bias_weight not in ("loss", "printed"):
            problems.append("bias_weight must be 'loss' or 'printed'")
        if problems:
            raise ValidationError(problems)


@dataclass(frozen=True)
class StratumSensitivity:
    point: float
    lower: float
    upper: float
    bias_l: float
    bias_r: float
    var_l: float
    var_r: float
    combined: float


@dataclass(frozen=True)
class SensitivityReport:
    gamma: float
    lambda_at_gamma: float
    strata: List[StratumSensitivity] = field(default_factory=list)

    def to_dict(self) -> Dict[str, object]:
        return {
            "gamma": self.gamma,
            "lambda_at_gamma": self.lambda_at_gamma,
            "strata": [asdict(s) for s in self.strata],
        }


@dataclass(frozen=True)
class ImpliedGammaResult:
    gamma_imp: float
    lambda_target: float
    lambda_at_gamma: float
    iterations: int
    converged: bool
    bracketed: bool = True
    gamma_max_used: float = float("nan")

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


# --- extrema --------------------------------------------------------------


def _mean_extrema_sorted(y: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> Tuple[float, float]:
    """Min and max of ``sum(v*y)/sum(v)`` over ``lo <= v <= hi``, ``y`` ascending."""
    zero = np.zeros(1)
    c_lo_y = np.concatenate([zero, np.cumsum(lo * y)])
    c_hi_y = np.concatenate([zero, np.cumsum(hi * y)])
    c_lo = np.concatenate([zero, np.cumsum(lo)])
    c_hi = np.concatenate([zero, np.cumsum(hi)])
    # cut j: units [0, j) take one endpoint, [j, n) the other
    up = (c_lo_y + (c_hi_y[-1] - c_hi_y)) / (c_lo + (c_hi[-1] - c_hi))
    down = (c_hi_y + (c_lo_y[-1] - c_lo_y)) / (c_hi + (c_lo[-1] - c_lo))
    return float(down.min()), float(up.max())


def _arm_extrema(y: np.ndarray, odds_excess: np.ndarray, gamma: float) -> Tuple[float, float]:
    order = np.argsort(y, kind="stable")
    ys = y[order]
    a = odds_excess[order]
    return _mean_extrema_sorted(ys, 1.0 + a / gamma, 1.0 + a * gamma)


def sipw_extrema(y, w, p_hat, gamma: float) -> Tuple[float, float]:
    """Smallest and largest SIPW contrast compatible with sensitivity level ``gamma``.

    ``y``, ``w``, ``p_hat`` describe the units of a single stratum.
    """
    if not gamma >= 1:
        raise ValidationError([f"gamma must be >= 1, got {gamma}"])
    y = np.asarray(y, dtype=float)
    w = np.asarray(w).astype(bool)
    p = np.asarray(p_hat, dtype=float)
    if not w.any() or w.all():
        raise ValidationError(["both treatment arms must be nonempty"])
    t_lo, t_hi = _arm_extrema(y[w], 1.0 / p[w] - 1.0, gamma)
    pc = p[~w]
    c_lo, c_hi = _arm_extrema(y[~w], pc / (1.0 - pc), gamma)
    return t_lo - c_hi, t_hi - c_lo


def _sipw_point(y, w, p) -> float:
    w = np.asarray(w).astype(bool)
    wt = 1.0 / p[w]
    wc = 1.0 / (1.0 - p[~w])
    return float(wt @ y[w] / wt.sum() - wc @ y[~w] / wc.sum())


# --- bootstrap ----------------------------------------------------------------


def _bootstrap_indices(
    w: np.ndarray, B: int, seed: int, stratum: int, stratify: bool
) -> List[np.ndarray]:
    n = w.shape[0]
    treated = np.flatnonzero(w)
    control = np.flatnonzero(~w)
    if treated.size < 2 or control.size < 2:
        raise ValidationError(
            [f"stratum {stratum} needs >= 2 units per arm for the bootstrap"]
        )
    out = []
    attempts = 0
    for b in range(B):
        rng = np.random.default_rng([seed, stratum, b])
        while True:
            attempts += 1
            if attempts > 10 * B:
                raise ValidationError([f"stratum {stratum} too small for bootstrap"])
            if stratify:
                idx = np.concatenate(
                    [
                        rng.choice(treated, treated.size, replace=True),
                        rng.choice(control, control.size, replace=True),
                    ]
                )
                break
            idx = rng.integers(0, n, n)
            nt = np.count_nonzero(w[idx])
            if 0 < nt < n:
                break
        out.append(idx)
    return out


def bootstrap_extrema_variance(
    y,
    w,
    p_hat,
    gamma: float,
    B: int,
    seed: int,
    stratum: int = 0,
    stratify: bool = False,
) -> Tuple[float, float]:
    """Bootstrap variances of the lower and upper SIPW extrema within one stratum.

    Units are resampled with replacement; replicates with an empty arm are
    redrawn.  Replicate ``b`` of stratum ``s`` uses the generator seeded by
    ``(seed, s, b)`` so results do not depend on evaluation order.
    """
    y = np.asarray(y, dtype=float)
    w = np.asarray(w).astype(bool)
    p = np.asarray(p_hat, dtype=float)
    idx = _bootstrap_indices(w, B, seed, stratum, stratify)
    lows, highs = _replicate_extrema(y, w, p, idx, gamma)
    return float(np.var(lows, ddof=1)), float(np.var(highs, ddof=1))


def _replicate_extrema(y, w, p, indices, gamma):
    lows = np.empty(len(indices))
    highs = np.empty(len(indices))
    for b, idx in enumerate(indices):
        lows[b], highs[b] = sipw_extrema(y[idx], w[idx], p[idx], gamma)
    return lows, highs


# --- lambda(gamma) ------------------------------------------------------------


class _Analysis:
    """Per-stratum data with bootstrap draws fixed once, so ``lambda(gamma)`` is deterministic."""

    def __init__(self, obs: StratifiedDataset, fusion: FusionInput, config: SensitivityConfig):
        if obs.K != fusion.K:
            raise ValidationError(
                [f"observational data has {obs.K} strata but the fusion input has {fusion.K}"]
            )
        if obs.p_hat is None:
            obs = obs.with_propensity(estimate_propensity(obs))
        self.config = config
        self.fusion = fusion
        self.diag = fusion.weights.diag
        self.trace_r = float(np.dot(self.diag, fusion.sigma_r2))
        self.strata = []
        for k in range(obs.K):
            m = obs.stratum == k
            y, w, p = obs.y[m], obs.w[m].astype(bool), obs.p_hat[m]
            idx = _bootstrap_indices(w, config.bootstrap_B, config.seed, k, config.stratify_bootstrap)
            self.strata.append((y, w, p, idx))
        self._cache: Dict[float, SensitivityReport] = {}

    def report(self, gamma: float) -> SensitivityReport:
        gamma = float(gamma)
        if gamma in self._cache:
            return self._cache[gamma]
        rows = []
        total = 0.0
        for k, (y, w, p, idx) in enumerate(self.strata):
            point = _sipw_point(y, w, p)
            lower, upper = sipw_extrema(y, w, p, gamma)
            lows, highs = _replicate_extrema(y, w, p, idx, gamma)
            var_l = float(np.var(lows, ddof=1))
            var_r = float(np.var(highs, ddof=1))
            # gamma = 1 collapses the interval onto the point up to rounding
            bias_l = max(point - lower, 0.0)
            bias_r = max(upper - point, 0.0)
            dk = self.diag[k]
            bw = dk if self.config.bias_weight == "loss" else dk * dk
            combined = max(bw * bias_l**2 + dk * var_l, bw * bias_r**2 + dk * var_r)
            total += combined
            rows.append(
                StratumSensitivity(point, lower, upper, bias_l, bias_r, var_l, var_r, combined)
            )
        lam = self.trace_r / (self.trace_r + total)
        rep = SensitivityReport(gamma=gamma, lambda_at_gamma=lam, strata=rows)
        self._cache[gamma] = rep
        return rep

    def lam(self, gamma: float) -> float:
        return self.report(gamma).lambda_at_gamma


def sensitivity_report(
    obs: StratifiedDataset, fusion: FusionInput, config: SensitivityConfig
) -> SensitivityReport:
    """Per-stratum extrema, biases and bootstrap variances at ``config.gamma``."""
    return _Analysis(obs, fusion, config).report(config.gamma)


def lambda_of_gamma(
    obs: StratifiedDataset, fusion: FusionInput, config: SensitivityConfig
) -> float:
    """Weight on ``tau_o`` implied by worst-case confounding at ``config.gamma``.

    ``Tr(S_r D) / (Tr(S_r D) + sum_k c_k)`` where ``c_k`` is the larger of the
    two one-sided worst-case MSE contributions of stratum ``k``.
    """
    return sensitivity_report(obs, fusion, config).lambda_at_gamma


def implied_gamma(
    obs: StratifiedDataset,
    fusion: FusionInput,
    config: SensitivityConfig,
    target: Optional[float] = None,
) -> ImpliedGammaResult:
    """Binary search for the gamma whose ``lambda(gamma)`` matches the data-driven factor.

    ``target`` defaults to :func:`~fusion_shrinkage.shrinkage.lambda1_plus`.
    Failure to bracket or converge is reported in the result, not raised.
    """
    if target is None:
        target = lambda1_plus(fusion)
    target = float(target)
    eps = config.epsilon
    an = _Analysis(obs, fusion, config)

    def result(g, lam, it, ok, bracketed=True, gmax=config.gamma_max):
        return ImpliedGammaResult(g, target, lam, it, ok, bracketed, gmax)

    lam_lo = an.lam(1.0)
    if abs(lam_lo - target) < eps:
        return result(1.0, lam_lo, 0, True)
    if target > lam_lo:
        return result(1.0, lam_lo, 0, False, bracketed=False)

    hi = float(config.gamma_max)
    lam_hi = an.lam(hi)
    expansions = 0
    while lam_hi > target and abs(lam_hi - target) >= eps and expansions < 10:
        hi *= 2.0
        lam_hi = an.lam(hi)
        expansions += 1
    if abs(lam_hi - target) < eps:
        return result(hi, lam_hi, 0, True, gmax=hi)
    if lam_hi > target:
        return result(hi, lam_hi, 0, False, bracketed=False, gmax=hi)

    lo = 1.0
    lam_mid = lam_lo
    mid = lo
    for it in range(1, config.max_iter + 1):
        mid = 0.5 * (lo + hi)
        lam_mid = an.lam(mid)
        if abs(lam_mid - target) < eps:
            return result(mid, lam_mid, it, True, gmax=hi)
        if lam_mid > target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * hi:
            break
    return result(mid, lam_mid, it, False, gmax=hi)


def gamma_blend(
    gamma: float,
    obs: StratifiedDataset,
    fusion: FusionInput,
    config: SensitivityConfig,
    convention: str = "shrinkage",
) -> ShrinkageOutput:
    """Fixed-weight combination using ``lambda(gamma)``.

    ``convention="shrinkage"`` puts weight ``lambda(gamma)`` on ``tau_o``, the
    same role the factor plays in every other estimator here, so more
    confounding means more reliance on ``tau_r``.  ``convention="printed"``
    uses ``lambda(gamma) * tau_r + (1 - lambda(gamma)) * tau_o`` instead.
    """
    cfg = SensitivityConfig(**{**asdict(config), "gamma": gamma})
    lam = lambda_of_gamma(obs, fusion, cfg)
    return blend_at_lambda(fusion, lam, convention)


def blend_at_lambda(fusion: FusionInput, lam: float, convention: str = "shrinkage") -> ShrinkageOutput:
    if convention == "shrinkage":
        factor = lam
    elif convention == "printed":
        factor = 1.0 - lam
    else:
        raise ValueError(f"unknown convention {convention!r}; use 'shrinkage' or 'printed'")
    return blend(fusion, factor, "gamma_blend", lambda_gamma=lam)
