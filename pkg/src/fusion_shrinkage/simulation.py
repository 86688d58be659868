"""Monte Carlo comparison of fusion estimators on synthetic studies.

Each outer replicate draws a covariate covariance, the covariates, an
unmeasured confounder, potential outcomes and stratum effects for an
observational population and an RCT population.  Each inner replicate redraws
the treatment assignments and evaluates every estimator against the known
stratum effects.

Generator streams are keyed by ``(seed, outer, inner, purpose)``, so a
replicate's result does not depend on which worker computes it or in what
order.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .causal import (
    StratifiedDataset,
    diff_in_means,
    fit_propensity,
    neyman_variance,
    sipw,
)
from .core import FusionInput, OracleSpec, ValidationError, WeightedLossSpec
from . import shrinkage as sh

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

ROSTER: Tuple[str, ...] = (
    "tau_r",
    "tau_o",
    "kappa1_plus",
    "kappa1_plus_star",
    "kappa2_plus",
    "kappa2_plus_star",
    "gs_delta1",
    "gs_delta2",
    "oracle",
    "kappa1",
    "kappa2",
)
PROPOSED: Tuple[str, ...] = ("kappa1_plus", "kappa1_plus_star", "kappa2_plus", "kappa2_plus_star")

BETA = np.ones(3)
GAMMA = BETA  # selection coefficients equal the outcome coefficients

_PURPOSE_POPULATION = 0
_PURPOSE_ASSIGN = 1
_PURPOSE_ORACLE = 2


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    """One simulation condition.

    ``u_coef`` sets how the unmeasured confounder enters treatment selection,
    ``logit p = gamma'X + u_coef * U``.  With ``+1`` units with high outcomes
    select into treatment, which yields the heavy selection bias the design
    calls for; ``-1`` reproduces the literal ``1/(1 + exp(-gamma'X + U))``
    and ``0`` removes unmeasured confounding.

    ``eta_var`` is the variance of the idiosyncratic part of the confounder,
    ``U = 1'X / 3 + eta``.  The default 1/16 treats the scale parameter 1/4 of
    ``eta`` as a standard deviation; set 0.25 to treat it as a variance.
    """

    n_o: int = 10_000
    n_r: int = 1_000
    K: int = 6
    strata_scheme: str = "similar"
    covariate_shift: bool = False
    adjustment: str = "none"
    outer_reps: int = 25
    inner_reps: int = 20
    cohens_d: float = 0.2
    seed: int = 20_190_101
    oracle_draws: int = 200
    u_coef: float = 1.0
    eta_var: float = 0.0625
    cohens_d_denominator: str = "y0"
    bias_weight: str = "loss"
    a2_form: str = "derived"
    neyman_ddof: int = 0

    def __post_init__(self):
        problems = []
        if self.n_o < 1 or self.n_r < 1:
            problems.append("n_o and n_r must be positive")
        if self.K < 1:
            problems.append("K must be positive")
        if self.strata_scheme not in ("similar", "variable"):
            problems.append("strata_scheme must be 'similar' or 'variable'")
        elif self.strata_scheme == "variable" and self.K % 2:
            problems.append("the variable strata scheme needs an even K")
        if self.adjustment not in ("none", "sipw"):
            problems.append("adjustment must be 'none' or 'sipw'")
        if self.outer_reps < 1 or self.inner_reps < 1:
            problems.append("outer_reps and inner_reps must be >= 1")
        if self.oracle_draws < 2:
            problems.append("oracle_draws must be >= 2")
        if not self.cohens_d > 0:
            problems.append("cohens_d must be positive")
        if not self.eta_var >= 0:
            problems.append("eta_var must be nonnegative")
        if not math.isfinite(self.u_coef):
            problems.append("u_coef must be finite")
        if self.cohens_d_denominator not in ("y0", "pooled"):
            problems.append("cohens_d_denominator must be 'y0' or 'pooled'")
        if problems:
            raise ValidationError(problems)

    @property
    def name(self) -> str:
        shift = "shift" if self.covariate_shift else "noshift"
        return f"K{self.K}_{self.strata_scheme}_{shift}_{self.adjustment}"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: Dict[str, Any]) -> "SimConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ValidationError([f"unknown config key {k!r}" for k in unknown])
        return cls(**obj)

    @classmethod
    def from_file(cls, path) -> "SimConfig":
        """Read a JSON or TOML file holding SimConfig fields."""
        path = Path(path)
        text = path.read_text()
        if path.suffix.lower() == ".toml":
            obj = tomllib.loads(text)
        else:
            obj = json.loads(text)
        return cls.from_dict(obj)


@dataclass(frozen=True)
class Population:
    """A finite population with fixed potential outcomes."""

    X: np.ndarray
    U: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    stratum: np.ndarray
    K: int
    p: Optional[np.ndarray] = None  # true propensity, observational only

    @property
    def n(self) -> int:
        return int(self.y0.shape[0])


@dataclass
class SimTruth:
    tau: np.ndarray
    boundaries: np.ndarray
    d: np.ndarray
    scale_factor: float
    sigma_r2_exact: np.ndarray
    xi_empirical: Optional[np.ndarray] = None
    sigma_o2_empirical: Optional[np.ndarray] = None
    xi_delta_method: Optional[np.ndarray] = None
    cohens_d_realized: float = float("nan")

    def to_dict(self) -> Dict[str, Any]:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


# --- data generating process --------------------------------------------------


def sample_covariance(rng: np.random.Generator, max_attempts: int = 100) -> np.ndarray:
    """3x3 correlation matrix with off-diagonals 0 (p=1/2), +0.1 or -0.1 (p=1/4 each)."""
    for _ in range(max_attempts):
        off = rng.choice([0.0, 0.1, -0.1], size=3, p=[0.5, 0.25, 0.25])
        S = np.eye(3)
        S[0, 1] = S[1, 0] = off[0]
        S[0, 2] = S[2, 0] = off[1]
        S[1, 2] = S[2, 1] = off[2]
        if np.linalg.eigvalsh(S).min() > 1e-8:
            return S
    raise SimulationError("could not draw a positive definite covariance")


def stratum_masses(K: int, scheme: str) -> np.ndarray:
    if scheme == "similar":
        return np.full(K, 1.0 / K)
    if scheme == "variable":
        half = K // 2
        return np.concatenate([np.full(half, 2.0 / (3 * K)), np.full(half, 4.0 / (3 * K))])
    raise ValueError(f"unknown strata scheme {scheme!r}")


def stratum_boundaries(K: int, scheme: str) -> np.ndarray:
    """Standard normal quantiles cutting the second covariate into K strata."""
    cum = np.concatenate([[0.0], np.cumsum(stratum_masses(K, scheme))])
    cum[-1] = 1.0
    return norm.ppf(cum)


def assign_strata(x2: np.ndarray, boundaries: np.ndarray) -> np.ndarray:
    return np.searchsorted(boundaries[1:-1], x2, side="right")


def _draw_units(rng, n, mean, cov, eta_var):
    X = rng.multivariate_normal(mean, cov, size=n, method="cholesky")
    U = X.sum(axis=1) / 3.0 + rng.normal(0.0, math.sqrt(eta_var), n)
    y0 = X @ BETA + U + rng.normal(0.0, 1.0, n)
    return X, U, y0


def true_propensity(X: np.ndarray, U: np.ndarray, u_coef: float = 1.0) -> np.ndarray:
    return expit(X @ GAMMA + u_coef * U)


def scale_to_cohens_d(
    effects,
    y0,
    weights: WeightedLossSpec,
    target: float,
    stratum: Optional[np.ndarray] = None,
    denominator: str = "y0",
) -> Tuple[np.ndarray, float]:
    """Rescale stratum effects so that ``|sum d_k tau_k| / sd`` equals ``target``.

    ``denominator="y0"`` uses the standard deviation of the control potential
    outcomes; ``"pooled"`` uses ``sqrt((var Y(0) + var Y(1)) / 2)``, which
    depends on the scaled effects and is solved by fixed-point iteration
    (needs ``stratum``).
    """
    effects = np.asarray(effects, dtype=float)
    y0 = np.asarray(y0, dtype=float)
    if not target > 0:
        raise ValidationError(["target Cohen's d must be positive"])
    mean_effect = float(np.dot(weights.d, effects))
    if mean_effect == 0:
        raise ValidationError(["effects have zero weighted mean; cannot scale"])
    sd0 = float(np.std(y0))
    if sd0 == 0:
        raise ValidationError(["outcomes have zero dispersion"])
    factor = target * sd0 / abs(mean_effect)
    if denominator == "pooled":
        if stratum is None:
            raise ValidationError(["pooled Cohen's d needs stratum labels"])
        for _ in range(100):
            y1 = y0 + factor * effects[stratum]
            sd = math.sqrt(0.5 * (np.var(y0) + np.var(y1)))
            new = target * sd / abs(mean_effect)
            if abs(new - factor) <= 1e-14 * factor:
                factor = new
                break
            factor = new
    elif denominator != "y0":
        raise ValueError(f"unknown Cohen's d denominator {denominator!r}")
    return effects * factor, factor


def cohens_d(tau, y0, weights: WeightedLossSpec) -> float:
    return abs(float(np.dot(weights.d, tau))) / float(np.std(y0))


def rct_variance(pop: Population) -> np.ndarray:
    """Exact randomization variance of the stratum difference in means.

    Half of each stratum (rounded down) is treated:
    ``S1^2/n_t + S0^2/n_c - S_tau^2/n`` with finite-population variances.
    """
    out = np.empty(pop.K)
    for k in range(pop.K):
        m = pop.stratum == k
        n = int(m.sum())
        nt = n // 2
        nc = n - nt
        s1 = np.var(pop.y1[m], ddof=1)
        s0 = np.var(pop.y0[m], ddof=1)
        st = np.var(pop.y1[m] - pop.y0[m], ddof=1)
        out[k] = s1 / nt + s0 / nc - st / n
    return out


def generate_populations(
    config: SimConfig, rng: np.random.Generator
) -> Tuple[Population, Population, SimTruth]:
    """Draw the observational and RCT populations for one outer replicate."""
    cov = sample_covariance(rng)
    mu_o = rng.uniform(-0.5, 0.5, 3) if config.covariate_shift else np.zeros(3)
    Xo, Uo, y0o = _draw_units(rng, config.n_o, mu_o, cov, config.eta_var)
    Xr, Ur, y0r = _draw_units(rng, config.n_r, np.zeros(3), cov, config.eta_var)
    bounds = stratum_boundaries(config.K, config.strata_scheme)
    so = assign_strata(Xo[:, 1], bounds)
    sr = assign_strata(Xr[:, 1], bounds)
    counts_o = np.bincount(so, minlength=config.K)
    counts_r = np.bincount(sr, minlength=config.K)
    problems = [f"observational stratum {k} is empty" for k in np.flatnonzero(counts_o == 0)]
    problems += [
        f"RCT stratum {k} has {c} units (need >= 4)"
        for k, c in enumerate(counts_r)
        if c < 4
    ]
    if problems:
        raise SimulationError("; ".join(problems))
    weights = WeightedLossSpec(counts_o / counts_o.sum())
    raw = rng.uniform(0.0, 1.0, config.K)
    tau, factor = scale_to_cohens_d(
        raw, y0o, weights, config.cohens_d, so, config.cohens_d_denominator
    )
    obs = Population(Xo, Uo, y0o, y0o + tau[so], so, config.K, true_propensity(Xo, Uo, config.u_coef))
    rct = Population(Xr, Ur, y0r, y0r + tau[sr], sr, config.K)
    truth = SimTruth(
        tau=tau,
        boundaries=bounds,
        d=weights.d,
        scale_factor=factor,
        sigma_r2_exact=rct_variance(rct),
        cohens_d_realized=cohens_d(tau, y0o, weights),
    )
    return obs, rct, truth


def assign_observational(obs: Population, rng: np.random.Generator) -> StratifiedDataset:
    w = (rng.random(obs.n) < obs.p).astype(int)
    y = np.where(w == 1, obs.y1, obs.y0)
    return StratifiedDataset(y, w, obs.stratum, obs.K, X=obs.X, role="observational")


def assign_rct(rct: Population, rng: np.random.Generator) -> StratifiedDataset:
    w = np.zeros(rct.n, dtype=int)
    for k in range(rct.K):
        idx = np.flatnonzero(rct.stratum == k)
        w[rng.choice(idx, idx.size // 2, replace=False)] = 1
    y = np.where(w == 1, rct.y1, rct.y0)
    return StratifiedDataset(y, w, rct.stratum, rct.K, X=rct.X, role="randomized")


def assign_treatments(
    obs: Population, rct: Population, rng: np.random.Generator
) -> Tuple[StratifiedDataset, StratifiedDataset]:
    """Bernoulli(p_i) selection in the observational study, half per stratum in the RCT."""
    return assign_observational(obs, rng), assign_rct(rct, rng)


def delta_method_bias(obs: Population) -> np.ndarray:
    """First-order bias of the unadjusted observational contrast.

    ``cov(Y(1), p)/mean(p) + cov(Y(0), p)/(1 - mean(p))`` within each stratum.
    """
    if obs.p is None:
        raise ValidationError(["delta-method bias needs the true propensities"])
    out = np.empty(obs.K)
    for k in range(obs.K):
        m = obs.stratum == k
        p = obs.p[m]
        pbar = p.mean()
        s_t = np.mean((obs.y1[m] - obs.y1[m].mean()) * (p - pbar))
        s_c = np.mean((obs.y0[m] - obs.y0[m].mean()) * (p - pbar))
        out[k] = s_t / pbar + s_c / (1.0 - pbar)
    return out


def observational_estimate(data: StratifiedDataset, adjustment: str) -> np.ndarray:
    if adjustment == "none":
        return diff_in_means(data)
    return sipw(data, fit_propensity(data.X, data.w))


# --- replicate loop -----------------------------------------------------------


def _rng(config: SimConfig, outer: int, inner: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, outer, inner, purpose])


def _evaluate(inp: FusionInput, oracle_lam: float, config: SimConfig) -> Dict[str, np.ndarray]:
    return {
        "tau_r": inp.tau_r,
        "tau_o": inp.tau_o,
        "kappa1_plus": sh.kappa1_plus(inp).estimate,
        "kappa1_plus_star": sh.kappa1_star(inp, positive_part=True).estimate,
        "kappa2_plus": sh.kappa2_family(inp, "plus").estimate,
        "kappa2_plus_star": sh.kappa2_family(inp, "plus_star", config.a2_form).estimate,
        "gs_delta1": sh.gs_delta1(inp).estimate,
        "gs_delta2": sh.gs_delta2(inp).estimate,
        # the oracle weight uses the exact RCT variances, not the estimated ones
        "oracle": inp.tau_r + oracle_lam * inp.delta,
        "kappa1": sh.kappa1(inp).estimate,
        "kappa2": sh.kappa2_family(inp, "plain").estimate,
    }


def run_outer(config: SimConfig, outer: int) -> Tuple[np.ndarray, SimTruth]:
    """Losses ``(inner_reps, len(ROSTER))`` and the truth for one outer replicate."""
    try:
        obs, rct, truth = generate_populations(
            config, _rng(config, outer, 0, _PURPOSE_POPULATION)
        )
    except Exception as exc:
        raise SimulationError(f"outer {outer}: population draw failed: {exc}") from exc
    weights = WeightedLossSpec(truth.d)

    # oracle moments from assignment draws that are not reused for risk
    aux = np.empty((config.oracle_draws, config.K))
    for j in range(config.oracle_draws):
        try:
            data = assign_observational(obs, _rng(config, outer, j, _PURPOSE_ORACLE))
            aux[j] = observational_estimate(data, config.adjustment)
        except Exception as exc:
            raise SimulationError(f"outer {outer} oracle draw {j}: {exc}") from exc
    truth.xi_empirical = aux.mean(axis=0) - truth.tau
    truth.sigma_o2_empirical = aux.var(axis=0, ddof=1)
    truth.xi_delta_method = delta_method_bias(obs)
    oracle = OracleSpec(truth.xi_empirical, truth.sigma_o2_empirical)
    oracle_lam = sh.oracle_lambda(truth.sigma_r2_exact, oracle, weights, config.bias_weight)

    diag = weights.diag
    losses = np.empty((config.inner_reps, len(ROSTER)))
    for i in range(config.inner_reps):
        try:
            rng = _rng(config, outer, i, _PURPOSE_ASSIGN)
            obs_data, rct_data = assign_treatments(obs, rct, rng)
            inp = FusionInput(
                tau_r=diff_in_means(rct_data),
                tau_o=observational_estimate(obs_data, config.adjustment),
                sigma_r2=neyman_variance(rct_data, ddof=config.neyman_ddof),
                weights=weights,
            )
            ests = _evaluate(inp, oracle_lam, config)
        except Exception as exc:
            raise SimulationError(f"outer {outer} inner {i}: {exc}") from exc
        for j, name in enumerate(ROSTER):
            r = ests[name] - truth.tau
            losses[i, j] = float(np.dot(diag, r * r))
    return losses, truth


def _run_outer_star(args):
    return run_outer(*args)


@dataclass
class RiskTable:
    """Mean loss per estimator over all replicates of one condition.

    ``se`` is the Monte Carlo standard error computed from the outer-replicate
    means (inner replicates share a population and are not independent).
    """

    estimators: Tuple[str, ...]
    risk: np.ndarray
    se: np.ndarray
    pct_reduction: np.ndarray
    losses: np.ndarray
    metadata: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_losses(cls, estimators, losses: np.ndarray, metadata=None) -> "RiskTable":
        losses = np.asarray(losses, dtype=float)
        risk = losses.mean(axis=(0, 1))
        se = _cluster_se(losses)
        base = risk[list(estimators).index("tau_r")]
        pct = 100.0 * (base - risk) / base
        return cls(tuple(estimators), risk, se, pct, losses, dict(metadata or {}))

    def index(self, name: str) -> int:
        return self.estimators.index(name)

    def row(self, name: str) -> Dict[str, float]:
        j = self.index(name)
        return {
            "name": name,
            "risk": float(self.risk[j]),
            "se": float(self.se[j]),
            "pct_reduction": float(self.pct_reduction[j]),
        }

    def relative_risk(self, name: str, baseline: str = "tau_r") -> float:
        return float(self.risk[self.index(name)] / self.risk[self.index(baseline)])

    def compare(self, a: str, b: str) -> Tuple[float, float]:
        """Mean of ``loss(a) - loss(b)`` and its paired Monte Carlo standard error."""
        diff = self.losses[..., self.index(a)] - self.losses[..., self.index(b)]
        return float(diff.mean()), float(_cluster_se(diff[..., None])[0])

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", "risk", "se", "pct_reduction"])
            for name in self.estimators:
                r = self.row(name)
                writer.writerow([name, repr(r["risk"]), repr(r["se"]), repr(r["pct_reduction"])])

    def sidecar(self) -> Dict[str, Any]:
        return {
            "rows": [self.row(n) for n in self.estimators],
            **self.metadata,
        }

    def write_sidecar(self, path) -> None:
        Path(path).write_text(json.dumps(self.sidecar(), indent=2, default=_json_default))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serializable: {type(o)}")


def _cluster_se(losses: np.ndarray) -> np.ndarray:
    n_outer, n_inner = losses.shape[:2]
    if n_outer >= 2:
        means = losses.mean(axis=1)
        return means.std(axis=0, ddof=1) / math.sqrt(n_outer)
    flat = losses.reshape(n_outer * n_inner, -1)
    if flat.shape[0] < 2:
        return np.full(flat.shape[1], np.nan)
    return flat.std(axis=0, ddof=1) / math.sqrt(flat.shape[0])


def run_condition(config: SimConfig, threads: int = 1) -> RiskTable:
    """Run every outer and inner replicate of one condition.

    ``threads > 1`` spreads outer replicates over worker processes; the result
    is identical for any value.
    """
    jobs = [(config, o) for o in range(config.outer_reps)]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_outer_star, jobs))
    else:
        results = [run_outer(*job) for job in jobs]
    losses = np.stack([r[0] for r in results])
    truths = [r[1].to_dict() for r in results]
    metadata = {
        "condition": config.name,
        "config": config.to_dict(),
        "cohens_d_definition": (
            "|sum_k d_k tau_k| / sd(Y(0)) over the observational population"
            if config.cohens_d_denominator == "y0"
            else "|sum_k d_k tau_k| / sqrt((var Y(0) + var Y(1)) / 2)"
        ),
        "se_method": "standard deviation of outer-replicate means / sqrt(outer_reps)",
        "truth": truths,
    }
    return RiskTable.from_losses(ROSTER, losses, metadata)


# --- condition grid -----------------------------------------------------------

GRID_AXES = {
    "K": (6, 20),
    "strata_scheme": ("similar", "variable"),
    "covariate_shift": (False, True),
    "adjustment": ("none", "sipw"),
}


def condition_grid(
    base: SimConfig,
    K: Sequence[int] = GRID_AXES["K"],
    strata_scheme: Sequence[str] = GRID_AXES["strata_scheme"],
    covariate_shift: Sequence[bool] = GRID_AXES["covariate_shift"],
    adjustment: Sequence[str] = GRID_AXES["adjustment"],
) -> List[SimConfig]:
    out = []
    for shift in covariate_shift:
        for adj in adjustment:
            for k in K:
                for scheme in strata_scheme:
                    out.append(
                        replace(base, K=k, strata_scheme=scheme, covariate_shift=shift, adjustment=adj)
                    )
    return out


FULL_SCALE_BASE = SimConfig()
QUICK_BASE = SimConfig(n_o=2000, n_r=400, outer_reps=10, inner_reps=10)
