import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy.optimize import minimize_scalar

from fusion_shrinkage import shrinkage as sh
from fusion_shrinkage.core import DegenerateInputError, OracleSpec, ValidationError, WeightedLossSpec

from conftest import fusion_inputs, make_input


@pytest.fixture
def uniform4():
    # K=4, d uniform, unit variances, delta = 2 everywhere
    return make_input(np.zeros(4), np.full(4, 2.0), np.ones(4))


@pytest.fixture
def hetero():
    rng = np.random.default_rng(7)
    K = 7
    return make_input(
        rng.normal(size=K), rng.normal(size=K), rng.uniform(0.2, 2, K), d=rng.dirichlet(np.ones(K))
    )


# --- URE ----------------------------------------------------------------------


def test_ure_at_zero_is_trace(hetero):
    t = float(np.dot(hetero.weights.d / hetero.K, hetero.sigma_r2))
    assert sh.ure_common_factor(0.0, hetero) == pytest.approx(t, rel=1e-14)


def test_ure_uniform_example(uniform4):
    assert sh.ure_common_factor(1.0, uniform4) == pytest.approx(0.75)


@pytest.mark.parametrize("lam", [0.0, 0.3, 1.0, 1.7])
def test_ure_matches_generic_stein_ure(hetero, lam):
    common = lambda z: z + lam * (hetero.tau_o - z)
    assert sh.generic_ure(common, hetero) == pytest.approx(sh.ure_common_factor(lam, hetero), rel=1e-7)
    vw = lambda z: z + lam * hetero.sigma_r2 * (hetero.tau_o - z)
    assert sh.generic_ure(vw, hetero) == pytest.approx(sh.ure_variance_weighted(lam, hetero), rel=1e-7)


def test_lambda1_is_stationary_point(hetero):
    lam = sh.lambda1_ure(hetero)
    h = 1e-5
    deriv = (sh.ure_common_factor(lam + h, hetero) - sh.ure_common_factor(lam - h, hetero)) / (2 * h)
    assert abs(deriv) < 1e-8
    for step in (1e-3, 1e-2, 1e-1):
        assert sh.ure_common_factor(lam + step, hetero) >= sh.ure_common_factor(lam, hetero)
        assert sh.ure_common_factor(lam - step, hetero) >= sh.ure_common_factor(lam, hetero)


def test_lambda2_is_argmin(hetero):
    res = minimize_scalar(lambda l: sh.ure_variance_weighted(l, hetero), bounds=(-10, 10),
                          method="bounded", options={"xatol": 1e-12})
    assert sh.lambda2_ure(hetero) == pytest.approx(res.x, abs=1e-7)


def test_lambda1_uniform_example(uniform4):
    assert sh.lambda1_ure(uniform4) == pytest.approx(0.25)


@given(fusion_inputs(), st.floats(0.1, 10))
def test_lambda1_homogeneity(inp, c):
    scaled = inp.replace(tau_o=inp.tau_r + c * inp.delta)
    assert sh.lambda1_ure(scaled) == pytest.approx(sh.lambda1_ure(inp) / c**2, rel=1e-9)


def test_degenerate_inputs_raise():
    inp = make_input([1.0, 2.0], [1.0, 2.0], [1.0, 1.0])
    for fn in (sh.lambda1_ure, sh.kappa1, sh.a1_star, sh.lambda2_ure, sh.kappa1_star):
        with pytest.raises(DegenerateInputError, match="any shrinkage factor"):
            fn(inp)


# --- common-factor family -----------------------------------------------------


def test_kappa1_uniform_example(uniform4):
    out = sh.kappa1(uniform4)
    np.testing.assert_allclose(out.estimate, 0.5)
    np.testing.assert_allclose(sh.kappa1_plus(uniform4).estimate, 0.5)


def test_kappa1_far_observational_tends_to_rct():
    inp = make_input([1.0, 2.0, 3.0], [1e6, -1e6, 1e6], [1.0, 1.0, 1.0])
    np.testing.assert_allclose(sh.kappa1(inp).estimate, inp.tau_r, atol=1e-5)


def test_kappa1_plus_floor_and_coincident():
    close = make_input([0.0, 0.0], [0.01, -0.01], [1.0, 1.0])
    assert sh.lambda1_ure(close) > 1
    np.testing.assert_array_equal(sh.kappa1_plus(close).estimate, close.tau_o)
    same = make_input([1.0, 2.0], [1.0, 2.0], [1.0, 1.0])
    out = sh.kappa1_plus(same)
    np.testing.assert_array_equal(out.estimate, same.tau_o)
    assert np.all(out.factors == 1.0)


def test_kappa1_reports_effective_lambda_above_one():
    inp = make_input([0.0, 0.0], [0.01, -0.01], [1.0, 1.0])
    out = sh.kappa1(inp)
    assert out.diagnostics["effective_lambda"] > 1
    assert np.all(out.factors > 1)


def test_a1_star_uniform_example(uniform4):
    # D = 1/16; delta' D^2 S delta = 4 * (1/256) * 4 = 1/16; delta' D delta = 1; Tr = 1/4
    assert sh.a1_star(uniform4) == pytest.approx(1 - 2 * (1 / 16) / 1 / 0.25)
    assert sh.a1_star(uniform4) == pytest.approx(0.5)


@given(st.integers(2, 30), st.floats(0.1, 5), st.integers(0, 10_000))
def test_a1_star_homoscedastic_is_one_minus_two_over_K(K, s2, seed):
    rng = np.random.default_rng(seed)
    inp = make_input(rng.normal(size=K), rng.normal(size=K), np.full(K, s2))
    assert sh.a1_star(inp) == pytest.approx(1 - 2 / K, rel=1e-9, abs=1e-12)


@given(fusion_inputs(), st.floats(0.1, 10))
def test_a1_star_scale_free_in_delta(inp, c):
    scaled = inp.replace(tau_o=inp.tau_r + c * inp.delta)
    assert sh.a1_star(scaled) == pytest.approx(sh.a1_star(inp), rel=1e-9, abs=1e-12)


def _ure_in_a(inp, family, a):
    def est(z):
        x = inp.replace(tau_r=z)
        if family == 1:
            return z + a * sh.lambda1_ure(x) * x.delta
        return z + a * sh.lambda2_ure(x) * x.sigma_r2 * x.delta
    return sh.generic_ure(est, inp)


def _quadratic_vertex(f):
    # f is exactly quadratic in a, so three evaluations pin down its minimizer
    fm, f0, fp = f(-1.0), f(0.0), f(1.0)
    return -(fp - fm) / 2 / (fp - 2 * f0 + fm)


def test_a1_star_minimizes_stein_ure(hetero):
    best = _quadratic_vertex(lambda a: _ure_in_a(hetero, 1, a))
    assert sh.a1_star(hetero) == pytest.approx(best, abs=1e-6)


def test_a2_star_derived_minimizes_stein_ure(hetero):
    best = _quadratic_vertex(lambda a: _ure_in_a(hetero, 2, a))
    assert sh.a2_star(hetero, "derived") == pytest.approx(best, abs=1e-6)
    assert abs(sh.a2_star(hetero, "printed") - best) > 1e-2


def test_a2_star_forms_agree_when_mean_variance_is_one():
    inp = make_input([0.0, 1.0, 2.0, 0.5], [1.0, 0.0, 2.5, 0.0], np.ones(4))
    assert sh.a2_star(inp, "printed") == pytest.approx(sh.a2_star(inp, "derived"), rel=1e-12)


def test_a2_star_derived_is_unit_free_printed_is_not(hetero):
    c = 10.0
    rescaled = hetero.replace(tau_r=c * hetero.tau_r, tau_o=c * hetero.tau_o, sigma_r2=c * c * hetero.sigma_r2)
    assert sh.a2_star(rescaled, "derived") == pytest.approx(sh.a2_star(hetero, "derived"), rel=1e-10)
    assert sh.a2_star(rescaled, "printed") != pytest.approx(sh.a2_star(hetero, "printed"), rel=1e-3)


def test_a2_forms_monte_carlo_comparison():
    # outcome units scaled by 10: the unit-free correction keeps its risk
    # advantage over the unit-dependent one
    rng = np.random.default_rng(3)
    K, n = 8, 4000
    s2 = np.linspace(0.5, 2.0, K) * 100.0
    tau = np.zeros(K)
    tau_o = tau + 10.0 * rng.normal(size=K) * 0.3
    w = WeightedLossSpec.uniform(K)
    risks = {"derived": 0.0, "printed": 0.0}
    for _ in range(n):
        z = tau + rng.normal(size=K) * np.sqrt(s2)
        inp = make_input(z, tau_o, s2)
        for form in risks:
            est = sh.kappa2_family(inp, "plus_star", form).estimate
            risks[form] += np.dot(w.diag, (est - tau) ** 2) / n
    assert risks["derived"] <= risks["printed"]


def test_kappa1_star_neutral_and_floor():
    # K=2 homoscedastic gives a1* = 0: factor clamps to zero and returns tau_r
    inp = make_input([0.0, 1.0], [1.0, 3.0], [1.0, 1.0])
    assert sh.a1_star(inp) == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(sh.kappa1_star(inp).estimate, inp.tau_r)
    # with a1* < 0 the clamp is reported
    inp = make_input([0.0, 1.0], [1.0, 3.0], [1.0, 10.0], d=[0.5, 0.5])
    out = sh.kappa1_star(inp)
    assert out.diagnostics["a_star"] < 0 and out.diagnostics["a_clamped"]
    np.testing.assert_array_equal(out.estimate, inp.tau_r)
    raw = sh.kappa1_star(inp, positive_part=False)
    assert raw.method == "kappa1_star"
    np.testing.assert_allclose(raw.factors, out.diagnostics["a_star"] * out.diagnostics["lambda_ure"])


def test_lambda1_plus_nonpositive_when_correction_negative():
    inp = make_input([0.0, 1.0], [1.0, 3.0], [1.0, 10.0])
    assert sh.a1_star(inp) < 0
    assert sh.lambda1_plus(inp) <= 0


# --- variance-weighted family -------------------------------------------------


def test_lambda2_uniform_example(uniform4):
    assert sh.lambda2_ure(uniform4) == pytest.approx(0.25)


@given(st.integers(1, 20), st.floats(0.05, 8), st.integers(0, 10_000))
def test_homoscedastic_collapse(K, s2, seed):
    rng = np.random.default_rng(seed)
    inp = make_input(rng.normal(size=K), rng.normal(size=K) + 3, np.full(K, s2))
    assert sh.lambda2_ure(inp) == pytest.approx(sh.lambda1_ure(inp) / s2, rel=1e-12)
    pairs = [("plain", sh.kappa1(inp)), ("plus", sh.kappa1_plus(inp)),
             ("plus_star", sh.kappa1_star(inp, positive_part=True)),
             ("star", sh.kappa1_star(inp, positive_part=False))]
    for variant, k1 in pairs:
        k2 = sh.kappa2_family(inp, variant)
        np.testing.assert_allclose(k2.estimate, k1.estimate, rtol=1e-12, atol=1e-12)


def test_kappa2_small_variance_component_stays_at_rct():
    inp = make_input([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [1e-9, 1.0, 1.0])
    out = sh.kappa2_family(inp, "plus")
    assert out.factors[0] < 1e-8
    assert out.estimate[0] == pytest.approx(0.0, abs=1e-8)


def test_kappa2_plus_clamps_each_component():
    inp = make_input([0.0, 0.0, 0.0], [0.1, 0.1, 5.0], [5.0, 0.1, 0.1])
    raw = sh.lambda2_ure(inp) * inp.sigma_r2
    assert raw[0] > 1
    out = sh.kappa2_family(inp, "plus")
    assert out.estimate[0] == inp.tau_o[0]
    assert out.diagnostics["n_clipped"] >= 1
    assert np.all((out.factors >= 0) & (out.factors <= 1))


def test_kappa2_plus_star_reports_clamped_correction():
    inp = make_input([0.0, 1.0], [1.0, 3.0], [1.0, 10.0])
    out = sh.kappa2_family(inp, "plus_star")
    assert out.diagnostics["a_star"] < 0 and out.diagnostics["a_clamped"]
    np.testing.assert_array_equal(out.estimate, inp.tau_r)


def test_kappa2_unknown_variant():
    with pytest.raises(ValueError, match="unknown kappa2 variant"):
        sh.kappa2_family(make_input([0.0], [1.0], [1.0]), "bogus")


# --- Green and Strawderman ----------------------------------------------------


def _gs_matrix_oracle(inp, a, kind):
    # direct matrix transcription with explicit inverses
    S = np.diag(inp.sigma_r2)
    Si = np.linalg.inv(S)
    diff = inp.tau_r - inp.tau_o
    if kind == 1:
        q = diff @ Si @ diff
        M = max(1 - a / q, 0.0) * np.eye(inp.K)
    else:
        q = diff @ Si @ Si @ diff
        M = np.clip(np.eye(inp.K) - a * Si / q, 0, 1) * np.eye(inp.K)
    return inp.tau_o + M @ diff


@settings(max_examples=50)
@given(fusion_inputs(min_K=3), st.floats(0, 10))
def test_gs_match_matrix_oracle(inp, a):
    np.testing.assert_allclose(sh.gs_delta1(inp, a).estimate, _gs_matrix_oracle(inp, a, 1), rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(sh.gs_delta2(inp, a).estimate, _gs_matrix_oracle(inp, a, 2), rtol=1e-9, atol=1e-9)


def test_gs_delta1_example():
    inp = make_input(np.ones(4), np.zeros(4), np.ones(4))
    out = sh.gs_delta1(inp, a=2)
    np.testing.assert_allclose(out.estimate, 0.5)


def test_gs_boundaries():
    inp = make_input([0.0, 0.1, 0.2, 0.0], [0.1, 0.0, 0.0, 0.1], [1.0, 2.0, 1.0, 3.0])
    np.testing.assert_array_equal(sh.gs_delta1(inp).estimate, inp.tau_o)  # q <= a
    np.testing.assert_allclose(sh.gs_delta1(inp, a=0).estimate, inp.tau_r)
    np.testing.assert_allclose(sh.gs_delta2(inp, a=0).estimate, inp.tau_r)
    np.testing.assert_allclose(sh.gs_delta2(inp, a=1e9).estimate, inp.tau_o)
    same = make_input([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [1.0, 1.0, 1.0])
    np.testing.assert_array_equal(sh.gs_delta1(same).estimate, same.tau_o)
    np.testing.assert_array_equal(sh.gs_delta2(same).estimate, same.tau_o)


def test_gs_default_needs_three_strata():
    inp = make_input([0.0, 0.0], [1.0, 1.0], [1.0, 1.0])
    with pytest.raises(ValidationError, match="K >= 3"):
        sh.gs_delta1(inp)
    sh.gs_delta1(inp, a=1.0)


@given(st.integers(3, 12), st.floats(0, 20), st.integers(0, 1000))
def test_gs_agree_under_unit_variance(K, a, seed):
    rng = np.random.default_rng(seed)
    inp = make_input(rng.normal(size=K), rng.normal(size=K), np.ones(K))
    np.testing.assert_allclose(sh.gs_delta1(inp, a).estimate, sh.gs_delta2(inp, a).estimate, rtol=1e-12, atol=1e-12)


# --- oracle ------------------------------------------------------------------


def test_oracle_lambda_limits():
    w = WeightedLossSpec.uniform(3)
    s2 = np.array([1.0, 2.0, 0.5])
    assert sh.oracle_lambda(s2, OracleSpec(np.zeros(3), np.zeros(3)), w) == 1.0
    assert sh.oracle_lambda(s2, OracleSpec(np.zeros(3), s2), w) == pytest.approx(0.5)
    assert sh.oracle_lambda(s2, OracleSpec(np.full(3, 1e6), s2), w) < 1e-10
    assert sh.oracle_lambda(s2, OracleSpec(np.full(3, 1e6), s2), w, "printed") < 1e-9


def test_oracle_lambda_minimizes_exact_risk():
    rng = np.random.default_rng(11)
    K = 6
    w = WeightedLossSpec(rng.dirichlet(np.ones(K)))
    s2, so, xi = rng.uniform(0.1, 1, K), rng.uniform(0.1, 1, K), rng.normal(size=K)
    # independent tau_r, tau_o: risk of the convex combination in closed form
    risk = lambda l: float(np.dot(w.diag, (1 - l) ** 2 * s2 + l**2 * (so + xi**2)))
    res = minimize_scalar(risk, bounds=(0, 1), method="bounded", options={"xatol": 1e-12})
    assert sh.oracle_lambda(s2, OracleSpec(xi, so), w) == pytest.approx(res.x, abs=1e-8)
    assert sh.oracle_lambda(s2, OracleSpec(xi, so), w, "printed") != pytest.approx(res.x, abs=1e-3)


def test_estimate_registry():
    inp = make_input([0.0, 1.0, 2.0], [1.0, 1.0, 1.0], [1.0, 1.0, 1.0])
    assert sh.ESTIMATOR_IDS == (
        "kappa1", "kappa1_plus", "kappa1_plus_star", "kappa2", "kappa2_plus",
        "kappa2_plus_star", "gs_delta1", "gs_delta2", "oracle", "tau_r", "tau_o",
    )
    for name in sh.ESTIMATOR_IDS:
        if name == "oracle":
            out = sh.estimate(inp, name, oracle=OracleSpec(np.zeros(3), np.ones(3)))
        else:
            out = sh.estimate(inp, name)
        assert out.method == name
    with pytest.raises(ValueError, match="valid ids: kappa1"):
        sh.estimate(inp, "nope")
    with pytest.raises(ValidationError, match="oracle"):
        sh.estimate(inp, "oracle")


@settings(max_examples=50)
@given(fusion_inputs(min_K=3), st.floats(-50, 50))
def test_translation_equivariance(inp, c):
    shifted = inp.replace(tau_r=inp.tau_r + c, tau_o=inp.tau_o + c)
    for name in sh.ESTIMATOR_IDS:
        if name == "oracle":
            continue
        a = sh.estimate(inp, name)
        b = sh.estimate(shifted, name)
        np.testing.assert_allclose(b.estimate, a.estimate + c, rtol=1e-9, atol=1e-8)
        np.testing.assert_allclose(b.factors, a.factors, rtol=1e-9, atol=1e-12)


@settings(max_examples=50)
@given(fusion_inputs(min_K=3))
def test_positive_part_factors_in_unit_interval(inp):
    for name in ("kappa1_plus", "kappa1_plus_star", "kappa2_plus", "kappa2_plus_star", "gs_delta1", "gs_delta2"):
        f = sh.estimate(inp, name).factors
        assert np.all((f >= 0) & (f <= 1))


# --- dominance ----------------------------------------------------------------


def test_dominance_examples():
    r = sh.check_dominance_conditions(np.ones(4), WeightedLossSpec.uniform(4))
    assert r.common_factor_dominates and r.margins[0] == pytest.approx(0.0, abs=1e-15)
    assert not sh.check_dominance_conditions(np.ones(3), WeightedLossSpec.uniform(3)).common_factor_dominates
    r = sh.check_dominance_conditions([10.0, 1, 1, 1], WeightedLossSpec.uniform(4))
    # 4 * 10/4 = 10 > 13/4
    assert not r.common_factor_dominates and r.margins[0] == pytest.approx(10 - 13 / 4)
    assert r.to_dict()["margins"] == list(r.margins)


@given(st.lists(st.floats(0.01, 10), min_size=1, max_size=15))
def test_dominance_flags_match_margins(s2):
    r = sh.check_dominance_conditions(s2, WeightedLossSpec.uniform(len(s2)))
    assert r.common_factor_dominates == (r.margins[0] <= 0)
    assert r.correction_no_worse == (r.margins[1] <= 0)
    assert r.variance_weighted_dominates == (r.margins[2] <= 0)


def _mc_risks(names, tau, tau_o, s2, w, n, seed):
    rng = np.random.default_rng(seed)
    K = tau.size
    losses = np.empty((n, len(names)))
    for i in range(n):
        z = tau + rng.normal(size=K) * np.sqrt(s2)
        inp = make_input(z, tau_o, s2, d=w.d)
        for j, name in enumerate(names):
            r = sh.estimate(inp, name).estimate - tau
            losses[i, j] = np.dot(w.diag, r * r)
    return losses


def test_positive_part_never_worse_in_monte_carlo():
    K = 5
    w = WeightedLossSpec.uniform(K)
    tau = np.zeros(K)
    for tau_o in (np.full(K, 0.2), np.linspace(-1, 1, K)):
        L = _mc_risks(["kappa1", "kappa1_plus"], tau, tau_o, np.ones(K), w, 3000, 1)
        diff = L[:, 1] - L[:, 0]
        assert diff.mean() <= 2 * diff.std(ddof=1) / np.sqrt(len(diff))
