"""Shrinkage estimators that pull an unbiased estimate toward a biased one.

Notation used throughout: ``D_k = d_k / K`` is the loss diagonal,
``delta = tau_o - tau_r`` and ``s2 = sigma_r2``.  Every trace and quadratic
form below is a plain weighted sum over strata.

Two estimator families are provided.  The common-factor family moves every
stratum by the same fraction ``lam`` of the way toward ``tau_o``; the
variance-weighted family moves stratum ``k`` by ``lam * s2_k``.  Each factor
is the minimizer of an unbiased risk estimate (URE), and the ``*_star``
variants rescale it by a data-driven correction ``a``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from .core import (
    DegenerateInputError,
    FusionInput,
    OracleSpec,
    ShrinkageOutput,
    ValidationError,
    WeightedLossSpec,
    blend,
)

__all__ = [
    "ESTIMATOR_IDS",
    "DominanceReport",
    "a1_star",
    "a2_star",
    "check_dominance_conditions",
    "estimate",
    "generic_ure",
    "gs_delta1",
    "gs_delta2",
    "kappa1",
    "kappa1_plus",
    "kappa1_star",
    "kappa2_family",
    "lambda1_plus",
    "lambda1_ure",
    "lambda2_ure",
    "oracle_estimate",
    "oracle_lambda",
    "ure_common_factor",
    "ure_variance_weighted",
]


def _trace(inp: FusionInput, power: int = 1) -> float:
    """``Tr(Sigma_r^power D)``."""
    return float(np.dot(inp.weights.diag, inp.sigma_r2**power))


def _quad(inp: FusionInput, weight: np.ndarray) -> float:
    delta = inp.delta
    return float(np.dot(weight, delta * delta))


def _require_separated(q: float, what: str) -> None:
    if not q > 0:
        raise DegenerateInputError(
            f"tau_o equals tau_r, so the {what} URE is flat: any shrinkage factor minimizes it"
        )


# --- unbiased risk estimates -------------------------------------------------


def ure_common_factor(lam: float, inp: FusionInput) -> float:
    """URE of ``tau_r - lam * (tau_r - tau_o)`` for a fixed ``lam``.

    ``Tr(S D) + lam^2 * delta' D delta - 2 lam Tr(S D)``
    """
    t = _trace(inp)
    q = _quad(inp, inp.weights.diag)
    return t + lam * lam * q - 2.0 * lam * t


def ure_variance_weighted(lam: float, inp: FusionInput) -> float:
    """URE of ``tau_r - lam * S (tau_r - tau_o)`` for a fixed ``lam``."""
    t = _trace(inp)
    t2 = _trace(inp, 2)
    q2 = _quad(inp, inp.weights.diag * inp.sigma_r2**2)
    return t + lam * lam * q2 - 2.0 * lam * t2


def generic_ure(
    estimator: Callable[[np.ndarray], np.ndarray], inp: FusionInput, step: float = 1e-6
) -> float:
    """Stein-type URE of an arbitrary differentiable estimator.

    ``estimator`` maps a candidate ``tau_r`` to an estimate, with ``tau_o``
    held fixed.  Writing the estimate as ``tau_r + S g(tau_r)``, the risk
    estimate is ``Tr(S D) + sum_k D_k s2_k^2 (g_k^2 + 2 dg_k/dtau_rk)``.
    Partial derivatives are taken by central differences of relative size
    ``step``.
    """
    z = inp.tau_r
    s2 = inp.sigma_r2
    g = (np.asarray(estimator(z), dtype=float) - z) / s2
    dg = np.empty_like(z)
    for k in range(z.size):
        h = step * max(1.0, abs(z[k]))
        up = z.copy()
        dn = z.copy()
        up[k] += h
        dn[k] -= h
        gk_up = (estimator(up)[k] - up[k]) / s2[k]
        gk_dn = (estimator(dn)[k] - dn[k]) / s2[k]
        dg[k] = (gk_up - gk_dn) / (2 * h)
    diag = inp.weights.diag
    return float(_trace(inp) + np.dot(diag * s2**2, g * g + 2 * dg))


# --- common shrinkage factor -------------------------------------------------


def lambda1_ure(inp: FusionInput) -> float:
    """Common factor minimizing :func:`ure_common_factor`: ``Tr(S D) / delta' D delta``."""
    q = _quad(inp, inp.weights.diag)
    _require_separated(q, "common-factor")
    return _trace(inp) / q


def a1_star(inp: FusionInput) -> float:
    """Correction for having estimated the common factor from the data.

    ``1 - 2 (delta' D^2 S delta) / (delta' D delta) / Tr(S D)``
    """
    diag = inp.weights.diag
    q = _quad(inp, diag)
    _require_separated(q, "common-factor")
    p = _quad(inp, diag * diag * inp.sigma_r2)
    return 1.0 - 2.0 * p / q / _trace(inp)


def kappa1(inp: FusionInput) -> ShrinkageOutput:
    """Unrestricted common-factor estimator; the factor may exceed one."""
    lam = lambda1_ure(inp)
    return blend(inp, lam, "kappa1", lambda_ure=lam, effective_lambda=lam)


def kappa1_plus(inp: FusionInput) -> ShrinkageOutput:
    """Common-factor estimator with the factor capped at one.

    Coincident inputs return ``tau_o`` (factor 1), the limit of the capped
    formula.
    """
    q = _quad(inp, inp.weights.diag)
    if q == 0:
        return blend(inp, 1.0, "kappa1_plus", lambda_ure=float("inf"), effective_lambda=1.0)
    lam = _trace(inp) / q
    eff = min(lam, 1.0)
    return blend(inp, eff, "kappa1_plus", lambda_ure=lam, effective_lambda=eff)


def kappa1_star(inp: FusionInput, positive_part: bool = True) -> ShrinkageOutput:
    """Common-factor estimator with the ``a1_star`` correction.

    With ``positive_part`` the correction is floored at zero and the combined
    factor is clipped into [0, 1]; otherwise ``a1_star * lambda1`` is used as is.
    """
    lam = lambda1_ure(inp)
    a = a1_star(inp)
    if positive_part:
        a_used = max(a, 0.0)
        eff = min(max(a_used * lam, 0.0), 1.0)
        method = "kappa1_plus_star"
    else:
        a_used = a
        eff = a * lam
        method = "kappa1_star"
    return blend(
        inp,
        eff,
        method,
        lambda_ure=lam,
        a_star=a,
        a_used=a_used,
        a_clamped=bool(a_used != a),
        effective_lambda=eff,
    )


def lambda1_plus(inp: FusionInput) -> float:
    """Data-driven weight on ``tau_o`` targeted by the implied-Gamma search.

    ``1 - (1 - a1_star * lambda1)_+``; note that the correction enters
    unfloored, so the result is nonpositive when ``a1_star <= 0``.
    """
    return 1.0 - max(1.0 - a1_star(inp) * lambda1_ure(inp), 0.0)


# --- variance-weighted shrinkage factors -------------------------------------


def lambda2_ure(inp: FusionInput) -> float:
    """Minimizer of :func:`ure_variance_weighted`: ``Tr(S^2 D) / delta' S^2 D delta``."""
    q2 = _quad(inp, inp.weights.diag * inp.sigma_r2**2)
    _require_separated(q2, "variance-weighted")
    return _trace(inp, 2) / q2


def a2_star(inp: FusionInput, form: str = "derived") -> float:
    """Correction factor for the variance-weighted family.

    ``form="derived"`` minimizes the URE of ``tau_r + a*lambda2*S*delta`` over
    ``a``:  ``1 - 2 (delta' S^4 D^2 delta) / (delta' S^2 D delta) / Tr(S^2 D)``.
    ``form="printed"`` divides by ``Tr(S D)`` instead, which is not invariant
    to the units of the outcome and only agrees with ``derived`` when the
    average variance is one.
    """
    diag = inp.weights.diag
    s2 = inp.sigma_r2
    q2 = _quad(inp, diag * s2**2)
    _require_separated(q2, "variance-weighted")
    p2 = _quad(inp, diag * diag * s2**4)
    if form == "derived":
        trailing = _trace(inp, 2)
    elif form == "printed":
        trailing = _trace(inp)
    else:
        raise ValueError(f"unknown a2_star form {form!r}; use 'derived' or 'printed'")
    return 1.0 - 2.0 * p2 / q2 / trailing


_KAPPA2_VARIANTS = ("plain", "plus", "star", "plus_star")


def kappa2_family(
    inp: FusionInput, variant: str = "plus", a2_form: str = "derived"
) -> ShrinkageOutput:
    """Variance-weighted estimators, stratum factor ``a * lambda2 * s2_k``.

    variant:
        ``plain``      a = 1, no clipping (may overshoot ``tau_o``)
        ``plus``       a = 1, each factor clipped into [0, 1]
        ``star``       a = a2_star, no clipping
        ``plus_star``  a = max(a2_star, 0), each factor clipped into [0, 1]
    """
    if variant not in _KAPPA2_VARIANTS:
        raise ValueError(f"unknown kappa2 variant {variant!r}; choose from {_KAPPA2_VARIANTS}")
    lam = lambda2_ure(inp)
    diagnostics: Dict[str, float] = {"lambda_ure": lam}
    a = 1.0
    if variant in ("star", "plus_star"):
        a_raw = a2_star(inp, a2_form)
        a = max(a_raw, 0.0) if variant == "plus_star" else a_raw
        diagnostics.update(a_star=a_raw, a_used=a, a_clamped=bool(a != a_raw))
    raw = a * lam * inp.sigma_r2
    if variant in ("plus", "plus_star"):
        factors = np.clip(raw, 0.0, 1.0)
        diagnostics["n_clipped"] = int(np.count_nonzero(factors != raw))
    else:
        factors = raw
    name = {"plain": "kappa2", "plus": "kappa2_plus", "star": "kappa2_star"}.get(
        variant, "kappa2_plus_star"
    )
    return blend(inp, factors, name, **diagnostics)


# --- Green and Strawderman baselines ------------------------------------------


def _default_a(inp: FusionInput, a: Optional[float]) -> float:
    if a is not None:
        return float(a)
    if inp.K < 3:
        raise ValidationError([f"default a = K - 2 needs K >= 3, got K = {inp.K}"])
    return float(inp.K - 2)


def gs_delta1(inp: FusionInput, a: Optional[float] = None) -> ShrinkageOutput:
    """``tau_o + (1 - a / (delta' S^-1 delta))_+ (tau_r - tau_o)``, default ``a = K - 2``."""
    a = _default_a(inp, a)
    q = _quad(inp, 1.0 / inp.sigma_r2)
    if q == 0:
        return blend(inp, 1.0, "gs_delta1", a=a, quad_form=0.0)
    keep = max(1.0 - a / q, 0.0)
    return blend(inp, 1.0 - keep, "gs_delta1", a=a, quad_form=q)


def gs_delta2(inp: FusionInput, a: Optional[float] = None) -> ShrinkageOutput:
    """``tau_o + (I - a S^-1 / (delta' S^-2 delta))_+ (tau_r - tau_o)``.

    The matrix in parentheses is diagonal; each entry is clipped into [0, 1].
    """
    a = _default_a(inp, a)
    q = _quad(inp, inp.sigma_r2**-2.0)
    if q == 0:
        return blend(inp, 1.0, "gs_delta2", a=a, quad_form=0.0)
    factors = np.clip(a / (inp.sigma_r2 * q), 0.0, 1.0)
    return blend(inp, factors, "gs_delta2", a=a, quad_form=q)


# --- oracle -------------------------------------------------------------------


def oracle_lambda(
    sigma_r2,
    oracle: OracleSpec,
    weights: WeightedLossSpec,
    bias_weight: str = "loss",
) -> float:
    """Risk-optimal fixed weight on ``tau_o`` given the true bias and variances.

    ``Tr(S_r D) / (Tr(S_r D) + Tr(S_o D) + xi' W xi)`` where ``W = D`` for
    ``bias_weight="loss"`` (the exact minimizer of the expected loss) and
    ``W = D^2`` for ``bias_weight="printed"``.
    """
    diag = weights.diag
    s2 = np.asarray(sigma_r2, dtype=float)
    if not (s2.shape == oracle.xi.shape == diag.shape):
        raise ValidationError(
            [f"oracle lengths {s2.size}, {oracle.xi.size} do not match K = {weights.K}"]
        )
    w = _bias_weight(diag, bias_weight)
    t = float(np.dot(diag, s2))
    denom = t + float(np.dot(diag, oracle.sigma_o2)) + float(np.dot(w, oracle.xi**2))
    return t / denom


def _bias_weight(diag: np.ndarray, bias_weight: str) -> np.ndarray:
    if bias_weight == "loss":
        return diag
    if bias_weight == "printed":
        return diag * diag
    raise ValueError(f"unknown bias_weight {bias_weight!r}; use 'loss' or 'printed'")


def oracle_estimate(
    inp: FusionInput, oracle: OracleSpec, bias_weight: str = "loss"
) -> ShrinkageOutput:
    lam = oracle_lambda(inp.sigma_r2, oracle, inp.weights, bias_weight)
    return blend(inp, lam, "oracle", lambda_opt=lam)


# --- dominance conditions -----------------------------------------------------


@dataclass(frozen=True)
class DominanceReport:
    """Finite-K sufficient conditions, each as ``lhs - rhs`` (holds iff <= 0).

    common_factor_dominates: ``4 max d s2 <= sum d s2`` (common factor beats tau_r)
    correction_no_worse: ``max d^2 s2^2 <= 1.5 (min d s2)^2`` (corrected beats uncorrected)
    variance_weighted_dominates: ``4 max d^2 s2^2 <= sum d^2 s2^2`` (variance-weighted beats tau_r)
    """

    common_factor_dominates: bool
    correction_no_worse: bool
    variance_weighted_dominates: bool
    margins: Tuple[float, float, float]

    def to_dict(self) -> Dict[str, object]:
        return {
            "common_factor_dominates": self.common_factor_dominates,
            "correction_no_worse": self.correction_no_worse,
            "variance_weighted_dominates": self.variance_weighted_dominates,
            "margins": list(self.margins),
        }


def check_dominance_conditions(sigma_r2, weights: WeightedLossSpec) -> DominanceReport:
    s2 = np.asarray(sigma_r2, dtype=float)
    if s2.shape != (weights.K,):
        raise ValidationError([f"sigma_r2 has length {s2.size}, expected {weights.K}"])
    ds = weights.d * s2
    ds2 = ds * ds
    m1 = 4.0 * ds.max() - ds.sum()
    m2 = ds2.max() - 1.5 * ds.min() ** 2
    m3 = 4.0 * ds2.max() - ds2.sum()
    margins = (float(m1), float(m2), float(m3))
    return DominanceReport(m1 <= 0, m2 <= 0, m3 <= 0, margins)


# --- registry -----------------------------------------------------------------


def _tau_r(inp: FusionInput) -> ShrinkageOutput:
    return blend(inp, 0.0, "tau_r")


def _tau_o(inp: FusionInput) -> ShrinkageOutput:
    return blend(inp, 1.0, "tau_o")


_REGISTRY: Dict[str, Callable[..., ShrinkageOutput]] = {
    "kappa1": kappa1,
    "kappa1_plus": kappa1_plus,
    "kappa1_plus_star": lambda inp, **kw: kappa1_star(inp, positive_part=True),
    "kappa2": lambda inp, **kw: kappa2_family(inp, "plain"),
    "kappa2_plus": lambda inp, **kw: kappa2_family(inp, "plus"),
    "kappa2_plus_star": lambda inp, a2_form="derived", **kw: kappa2_family(
        inp, "plus_star", a2_form
    ),
    "gs_delta1": lambda inp, a=None, **kw: gs_delta1(inp, a),
    "gs_delta2": lambda inp, a=None, **kw: gs_delta2(inp, a),
    "oracle": None,  # needs an OracleSpec, dispatched in estimate()
    "tau_r": _tau_r,
    "tau_o": _tau_o,
}

ESTIMATOR_IDS: Tuple[str, ...] = tuple(_REGISTRY)


def estimate(
    inp: FusionInput,
    method: str,
    oracle: Optional[OracleSpec] = None,
    **options,
) -> ShrinkageOutput:
    """Run an estimator by its stable string id (see ``ESTIMATOR_IDS``)."""
    if method not in _REGISTRY:
        raise ValueError(f"unknown estimator {method!r}; valid ids: {', '.join(ESTIMATOR_IDS)}")
    if method == "oracle":
        if oracle is None:
            raise ValidationError(["the oracle estimator needs the true bias xi and sigma_o2"])
        return oracle_estimate(inp, oracle, options.get("bias_weight", "loss"))
    fn = _REGISTRY[method]
    if method in ("kappa1", "kappa1_plus", "tau_r", "tau_o"):
        return fn(inp)
    return fn(inp, **options)
