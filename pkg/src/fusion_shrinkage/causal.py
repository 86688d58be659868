"""Stratum-level effect estimates from unit-level study data."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
from scipy.special import expit

from .core import FusionInput, ValidationError, WeightedLossSpec

ROLES = ("observational", "randomized")
PROB_CLIP = 1e-6


class PropensityFitError(ValueError):
    """Logistic regression could not be fit (rank deficiency or separation)."""


@dataclass(frozen=True)
class Unit:
    y: float
    w: int
    stratum: int
    x: Sequence[float] = ()
    p_hat: Optional[float] = None


@dataclass(frozen=True)
class StratifiedDataset:
    """Column-oriented unit records for one study.

    Attributes:
        y: Observed outcomes.
        w: Treatment indicators (0/1).
        stratum: Stratum labels in ``[0, K)``.
        K: Number of strata.
        X: ``n x p`` covariates (``p`` may be 0).
        p_hat: Optional estimated propensities, strictly inside (0, 1).
        role: ``"observational"`` or ``"randomized"``.
    """

    y: np.ndarray
    w: np.ndarray
    stratum: np.ndarray
    K: int
    X: Optional[np.ndarray] = None
    p_hat: Optional[np.ndarray] = None
    role: str = "observational"

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        w = np.asarray(self.w)
        s = np.asarray(self.stratum)
        n = y.shape[0]
        problems = []
        if y.ndim != 1:
            problems.append("y must be one-dimensional")
        if w.shape != (n,) or s.shape != (n,):
            problems.append("y, w and stratum must have equal length")
        if w.size and not np.all((w == 0) | (w == 1)):
            problems.append("w must contain only 0 and 1")
        if s.size and (np.any(s < 0) or np.any(s >= self.K) or np.any(s != np.round(s))):
            problems.append(f"stratum labels must be integers in [0, {self.K})")
        if self.role not in ROLES:
            problems.append(f"role must be one of {ROLES}")
        X = self.X
        if X is None:
            X = np.empty((n, 0))
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] != n:
            problems.append(f"X has {X.shape[0]} rows, expected {n}")
        p = self.p_hat
        if p is not None:
            p = np.asarray(p, dtype=float)
            if p.shape != (n,):
                problems.append("p_hat must have one entry per unit")
            elif np.any(~((p > 0) & (p < 1))):
                problems.append("p_hat must lie strictly inside (0, 1)")
        if problems:
            raise ValidationError(problems)
        for name, arr in (
            ("y", y),
            ("w", w.astype(np.int8)),
            ("stratum", s.astype(np.intp)),
            ("X", X.copy()),
            ("p_hat", None if p is None else p.copy()),
        ):
            if arr is not None:
                arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_units(
        cls, units: Iterable[Unit], K: int, role: str = "observational"
    ) -> "StratifiedDataset":
        units = list(units)
        p_list = [u.p_hat for u in units]
        has_p = all(p is not None for p in p_list) and units
        if any(p is not None for p in p_list) and not has_p:
            raise ValidationError(["p_hat must be given for all units or none"])
        X = np.array([list(u.x) for u in units], dtype=float).reshape(len(units), -1)
        return cls(
            y=np.array([u.y for u in units], dtype=float),
            w=np.array([u.w for u in units]),
            stratum=np.array([u.stratum for u in units]),
            K=K,
            X=X,
            p_hat=np.array(p_list, dtype=float) if has_p else None,
            role=role,
        )

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    def with_propensity(self, p_hat) -> "StratifiedDataset":
        return StratifiedDataset(self.y, self.w, self.stratum, self.K, self.X, p_hat, self.role)

    def arm_counts(self) -> np.ndarray:
        """``K x 2`` matrix of (control, treated) counts."""
        counts = np.zeros((self.K, 2), dtype=np.intp)
        np.add.at(counts, (self.stratum, self.w), 1)
        return counts

    def subset(self, k: int) -> "StratifiedDataset":
        m = self.stratum == k
        return StratifiedDataset(
            self.y[m],
            self.w[m],
            np.zeros(int(m.sum()), dtype=np.intp),
            1,
            self.X[m],
            None if self.p_hat is None else self.p_hat[m],
            self.role,
        )


def _check_arms(data: StratifiedDataset, minimum: int) -> np.ndarray:
    counts = data.arm_counts()
    problems = []
    for k in range(data.K):
        for arm, label in ((1, "treated"), (0, "control")):
            if counts[k, arm] < minimum:
                problems.append(
                    f"stratum {k} has {counts[k, arm]} {label} units (need >= {minimum})"
                )
    if problems:
        raise ValidationError(problems)
    return counts


def _group_sum(data: StratifiedDataset, values: np.ndarray, arm: int) -> np.ndarray:
    m = data.w == arm
    return np.bincount(data.stratum[m], weights=values[m], minlength=data.K)


def diff_in_means(data: StratifiedDataset) -> np.ndarray:
    """Treated mean minus control mean within each stratum."""
    counts = _check_arms(data, 1)
    mt = _group_sum(data, data.y, 1) / counts[:, 1]
    mc = _group_sum(data, data.y, 0) / counts[:, 0]
    return mt - mc


def _hajek_means(data: StratifiedDataset, p: np.ndarray):
    wt = 1.0 / p
    wc = 1.0 / (1.0 - p)
    mt = _group_sum(data, wt * data.y, 1) / _group_sum(data, wt, 1)
    mc = _group_sum(data, wc * data.y, 0) / _group_sum(data, wc, 0)
    return mt, mc


def sipw(data: StratifiedDataset, p_hat=None) -> np.ndarray:
    """Stabilized (normalized-weight) inverse probability weighted contrast per stratum."""
    if p_hat is not None:
        data = data.with_propensity(p_hat)
    if data.p_hat is None:
        raise ValidationError(["SIPW needs p_hat for every unit"])
    _check_arms(data, 1)
    mt, mc = _hajek_means(data, data.p_hat)
    return mt - mc


def neyman_variance(data: StratifiedDataset, ddof: int = 0) -> np.ndarray:
    """Estimated variance of the stratified difference in means.

    Component k is ``v_t / n_t + v_c / n_c`` where ``v`` is the within-arm
    variance of the outcome with ``ddof`` degrees of freedom removed (0 gives
    the centered-sum/``n`` normalization; 1 the usual sample variance).
    """
    counts = _check_arms(data, 2).astype(float)
    out = np.zeros(data.K)
    for arm in (0, 1):
        n = counts[:, arm]
        mean = _group_sum(data, data.y, arm) / n
        resid = data.y - mean[data.stratum]
        ss = _group_sum(data, resid * resid, arm)
        out += ss / (n - ddof) / n
    if np.any(out <= 0):
        zero = np.flatnonzero(out <= 0).tolist()
        warnings.warn(
            f"zero estimated RCT variance in strata {zero}; shrinkage factors will be degenerate",
            RuntimeWarning,
            stacklevel=2,
        )
    return out


def fit_propensity(
    X, w, max_iter: int = 100, tol: float = 1e-8, return_coef: bool = False
):
    """Logistic regression of ``w`` on ``[1, X]`` by iteratively reweighted least squares.

    Stops when the largest absolute coefficient change drops below ``tol``.
    Fitted probabilities are clipped to ``[1e-6, 1 - 1e-6]``.

    Raises:
        PropensityFitError: rank-deficient design, or no convergence within
            ``max_iter`` steps (typically perfect separation).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    w = np.asarray(w, dtype=float)
    n = X.shape[0]
    Z = np.column_stack([np.ones(n), X])
    p = Z.shape[1]
    if n <= p:
        raise PropensityFitError(f"need more units ({n}) than parameters ({p})")
    if np.linalg.matrix_rank(Z) < p:
        raise PropensityFitError("design matrix [1, X] is rank deficient")
    if w.min() == w.max():
        raise PropensityFitError("treatment is constant; the logistic fit is separated")

    beta = np.zeros(p)
    mean_w = w.mean()
    beta[0] = np.log(mean_w / (1 - mean_w))
    converged = False
    for _ in range(max_iter):
        eta = Z @ beta
        mu = expit(eta)
        v = np.maximum(mu * (1 - mu), 1e-12)
        grad = Z.T @ (w - mu)
        hess = (Z * v[:, None]).T @ Z
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError as exc:
            raise PropensityFitError("singular information matrix (separation)") from exc
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            converged = True
            break
    if not converged or not np.all(np.isfinite(beta)):
        raise PropensityFitError(
            f"IRLS did not converge in {max_iter} iterations; coefficients diverge "
            "(perfect or quasi-complete separation)"
        )
    probs = np.clip(expit(Z @ beta), PROB_CLIP, 1 - PROB_CLIP)
    if return_coef:
        return probs, beta
    return probs


def estimate_propensity(data: StratifiedDataset, mode: str = "shared") -> np.ndarray:
    """Fit propensities on the covariates: one model (``shared``) or one per stratum."""
    if data.X.shape[1] == 0:
        raise ValidationError(["no covariates available for propensity fitting"])
    if mode == "shared":
        return fit_propensity(data.X, data.w)
    if mode == "per_stratum":
        out = np.empty(data.n)
        for k in range(data.K):
            m = data.stratum == k
            out[m] = fit_propensity(data.X[m], data.w[m])
        return out
    raise ValueError(f"unknown propensity mode {mode!r}; use 'shared' or 'per_stratum'")


def stratum_weights(data: StratifiedDataset) -> WeightedLossSpec:
    """``d_k = n_k / n`` from the stratum frequencies of ``data``."""
    counts = np.bincount(data.stratum, minlength=data.K)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValidationError([f"stratum {k} is empty" for k in empty])
    return WeightedLossSpec(counts / counts.sum())


def build_fusion_input(
    obs: StratifiedDataset,
    rct: StratifiedDataset,
    adjustment: str = "none",
    propensity_mode: str = "shared",
    ddof: int = 0,
) -> FusionInput:
    """Assemble the estimator input from an observational study and an RCT.

    ``adjustment="sipw"`` uses ``obs.p_hat`` when present and otherwise fits
    propensities on ``obs.X``.
    """
    if obs.K != rct.K:
        raise ValidationError([f"stratum counts differ: observational {obs.K}, RCT {rct.K}"])
    if adjustment == "none":
        tau_o = diff_in_means(obs)
    elif adjustment == "sipw":
        p = obs.p_hat
        if p is None:
            if obs.X.shape[1] == 0:
                raise ValidationError(
                    ["SIPW needs p_hat or covariates (x1..xp) to fit propensities"]
                )
            p = estimate_propensity(obs, propensity_mode)
        tau_o = sipw(obs, p)
    else:
        raise ValueError(f"unknown adjustment {adjustment!r}; use 'none' or 'sipw'")
    return FusionInput(
        tau_r=diff_in_means(rct),
        tau_o=tau_o,
        sigma_r2=neyman_variance(rct, ddof=ddof),
        weights=stratum_weights(obs),
    )


# --- CSV I/O ------------------------------------------------------------------


def read_csv(path, role: str = "observational", K: Optional[int] = None) -> StratifiedDataset:
    """Read columns ``y, w, stratum, x1..xp`` and optional ``p_hat``."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in ("y", "w", "stratum") if c not in header]
        if missing:
            raise ValidationError([f"{path}: missing column {c!r}" for c in missing])
        xcols = sorted(
            (c for c in header if c.startswith("x") and c[1:].isdigit()), key=lambda c: int(c[1:])
        )
        rows = list(reader)
    problems: List[str] = []

    def column(name, cast=float):
        out = []
        for i, row in enumerate(rows):
            try:
                out.append(cast(row[name]))
            except (TypeError, ValueError):
                problems.append(f"{path}: row {i + 2}: bad value {row[name]!r} in column {name}")
                out.append(0)
        return np.array(out, dtype=float)

    y = column("y")
    w = column("w")
    s = column("stratum")
    X = np.column_stack([column(c) for c in xcols]) if xcols else np.empty((len(rows), 0))
    p = column("p_hat") if "p_hat" in header else None
    if problems:
        raise ValidationError(problems)
    if K is None:
        K = int(s.max()) + 1 if s.size else 0
    return StratifiedDataset(y=y, w=w.astype(int), stratum=s.astype(int), K=K, X=X, p_hat=p, role=role)


def write_csv(data: StratifiedDataset, path) -> None:
    p = data.X.shape[1]
    header = ["y", "w", "stratum"] + [f"x{j + 1}" for j in range(p)]
    if data.p_hat is not None:
        header.append("p_hat")
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(data.n):
            row = [repr(float(data.y[i])), int(data.w[i]), int(data.stratum[i])]
            row += [repr(float(v)) for v in data.X[i]]
            if data.p_hat is not None:
                row.append(repr(float(data.p_hat[i])))
            writer.writerow(row)
