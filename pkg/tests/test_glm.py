import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import chi_square_tail, newton_mle, normal_two_sided_p, ols
from rrforest.glm import (
    GlmFit,
    LinkFamily,
    NegativeDevianceDrop,
    SingularInformation,
    chi_square_sf,
    fit_glm,
    likelihood_ratio_test,
    wald_p_value,
)

FAMILIES = ["gaussian-identity", "binomial-logit", "poisson-log"]


def ones(n):
    return np.ones((n, 1))


class TestLinkFamily:
    def test_canonical_links(self):
        assert LinkFamily.POISSON.link(math.e) == pytest.approx(1.0)
        assert LinkFamily.BINOMIAL.link(0.5) == pytest.approx(0.0)
        assert LinkFamily.GAUSSIAN.link(3.0) == 3.0

    @pytest.mark.parametrize("alias,expected", [
        ("poisson", LinkFamily.POISSON),
        ("binomial-logit", LinkFamily.BINOMIAL),
        ("gaussian-identity", LinkFamily.GAUSSIAN),
    ])
    def test_parse(self, alias, expected):
        assert LinkFamily.parse(alias) is expected

    def test_parse_rejects_unknown(self):
        with pytest.raises(ValueError):
            LinkFamily.parse("gamma-inverse")


class TestFitGlmExamples:
    def test_gaussian_intercept_is_mean(self):
        fit = fit_glm(ones(3), [1, 2, 3], "gaussian-identity")
        assert fit.coefficients[0] == pytest.approx(2.0, abs=1e-12)
        assert fit.converged

    def test_poisson_intercept_is_log_mean(self):
        fit = fit_glm(ones(4), [0, 1, 2, 3], "poisson-log")
        assert fit.coefficients[0] == pytest.approx(math.log(1.5), abs=1e-10)

    def test_binomial_intercept_is_logit_mean(self):
        fit = fit_glm(ones(4), [0, 0, 1, 1], "binomial-logit")
        assert fit.coefficients[0] == pytest.approx(0.0, abs=1e-10)

    def test_poisson_two_column_matches_newton(self):
        x = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 2.5])
        y = np.array([1, 0, 2, 3, 2, 6], dtype=float)
        design = np.column_stack([np.ones(6), x])
        fit = fit_glm(design, y, "poisson-log")
        np.testing.assert_allclose(fit.coefficients, newton_mle("poisson-log", design, y), atol=1e-8)

    def test_poisson_loglik_includes_factorial_term(self):
        y = np.array([0.0, 1, 2, 3])
        fit = fit_glm(ones(4), y, "poisson-log")
        mu = 1.5
        expected = sum(v * math.log(mu) - mu - math.lgamma(v + 1) for v in y)
        assert fit.log_likelihood == pytest.approx(expected, abs=1e-10)

    def test_gaussian_standard_errors_use_dispersion(self):
        rng = np.random.default_rng(1)
        X = np.column_stack([np.ones(40), rng.normal(size=40)])
        y = X @ [1.0, 2.0] + rng.normal(scale=3.0, size=40)
        fit = fit_glm(X, y, "gaussian-identity")
        resid = y - X @ fit.coefficients
        sigma2 = resid @ resid / (40 - 2)
        se = np.sqrt(np.diag(sigma2 * np.linalg.inv(X.T @ X)))
        np.testing.assert_allclose(fit.standard_errors, se, rtol=1e-6)

    def test_binomial_separation_not_converged(self):
        x = np.arange(10.0)
        y = (x > 4.5).astype(float)
        fit = fit_glm(np.column_stack([np.ones(10), x]), y, "binomial-logit")
        assert not fit.converged
        assert fit.separated

    def test_rank_deficient_design_rejected_or_finite(self):
        X = np.column_stack([np.ones(5), np.ones(5)])
        try:
            fit = fit_glm(X, [1, 2, 3, 4, 5], "gaussian-identity")
        except SingularInformation:
            return
        # the ridge safeguard split the intercept evenly
        assert np.all(np.isfinite(fit.coefficients))
        assert fit.coefficients.sum() == pytest.approx(3.0, abs=1e-5)

    @pytest.mark.parametrize("bad", [
        dict(design=np.ones((2, 3)), y=[1.0, 2.0]),
        dict(design=np.ones((3, 1)), y=[1.0, np.nan, 2.0]),
        dict(design=np.ones((3, 1)), y=[1.0, 2.0]),
    ])
    def test_invalid_inputs(self, bad):
        with pytest.raises(ValueError):
            fit_glm(bad["design"], bad["y"], "gaussian-identity")

    def test_negative_poisson_outcome_rejected(self):
        with pytest.raises(ValueError):
            fit_glm(ones(3), [1.0, -1.0, 2.0], "poisson-log")

    def test_binomial_requires_binary(self):
        with pytest.raises(ValueError):
            fit_glm(ones(3), [0.0, 2.0, 1.0], "binomial-logit")

    def test_warm_start_same_answer(self):
        rng = np.random.default_rng(3)
        X = np.column_stack([np.ones(50), rng.normal(size=(50, 2))])
        y = rng.poisson(np.exp(X @ [0.2, 0.3, -0.4])).astype(float)
        cold = fit_glm(X, y, "poisson-log")
        warm = fit_glm(X, y, "poisson-log", start=cold.coefficients + 0.1)
        np.testing.assert_allclose(warm.coefficients, cold.coefficients, atol=1e-9)


class TestWald:
    @staticmethod
    def fake_fit(beta, se):
        return GlmFit(np.array([beta]), np.array([se]), 0.0, 0.0, True, 1,
                      LinkFamily.GAUSSIAN, 10)

    def test_zero_coefficient(self):
        assert wald_p_value(self.fake_fit(0.0, 1.0), 0).p_value == 1.0

    @pytest.mark.parametrize("z,p", [(1.959964, 0.05), (2.575829, 0.01)])
    def test_reference_quantiles(self, z, p):
        res = wald_p_value(self.fake_fit(z, 1.0), 0)
        assert res.p_value == pytest.approx(p, abs=1e-6)
        assert res.p_value == pytest.approx(normal_two_sided_p(z), abs=1e-12)

    def test_zero_standard_error_is_degenerate(self):
        res = wald_p_value(self.fake_fit(1.0, 0.0), 0)
        assert res.degenerate and res.p_value == 1.0 and res.z_statistic == 0.0

    @given(st.floats(0, 8), st.floats(0.01, 5))
    def test_sign_symmetric(self, b, se):
        up = wald_p_value(self.fake_fit(b, se), 0).p_value
        down = wald_p_value(self.fake_fit(-b, se), 0).p_value
        assert up == down

    @given(st.floats(0, 7), st.floats(0, 7))
    def test_monotone_in_abs_z(self, a, b):
        pa = wald_p_value(self.fake_fit(a, 1.0), 0).p_value
        pb = wald_p_value(self.fake_fit(b, 1.0), 0).p_value
        if a < b:
            assert pa >= pb


class TestChiSquare:
    def test_zero(self):
        for df in range(1, 6):
            assert chi_square_sf(0.0, df) == 1.0

    def test_closed_form_df2(self):
        assert chi_square_sf(2 * math.log(10), 2) == pytest.approx(0.1, abs=1e-14)
        assert chi_square_sf(2 * math.log(20), 2) == pytest.approx(0.05, abs=1e-14)

    def test_df1_quantile(self):
        assert chi_square_sf(6.634897, 1) == pytest.approx(0.01, abs=1e-6)
        assert chi_square_sf(3.841459, 1) == pytest.approx(0.05, abs=1e-6)

    def test_integration_oracle_grid(self):
        for df in range(1, 11):
            for x in np.round(np.arange(0.1, 20.0001, 0.1), 10):
                assert abs(chi_square_sf(x, df) - chi_square_tail(x, df)) < 1e-6

    @given(st.floats(0, 50), st.floats(0, 50), st.integers(1, 10))
    def test_monotone(self, a, b, df):
        lo, hi = min(a, b), max(a, b)
        assert chi_square_sf(lo, df) >= chi_square_sf(hi, df)

    @pytest.mark.parametrize("x,df", [(-1.0, 1), (1.0, 0), (float("nan"), 1)])
    def test_invalid(self, x, df):
        with pytest.raises(ValueError):
            chi_square_sf(x, df)


class TestLikelihoodRatio:
    def _nested(self, seed=0):
        rng = np.random.default_rng(seed)
        X = np.column_stack([np.ones(80), rng.normal(size=(80, 2))])
        y = rng.poisson(np.exp(X @ [0.1, 0.4, 0.0])).astype(float)
        null = fit_glm(X[:, :2], y, "poisson-log")
        full = fit_glm(X, y, "poisson-log")
        return null, full

    def test_matches_chi_square(self):
        null, full = self._nested()
        p = likelihood_ratio_test(null, full, 1)
        assert p == pytest.approx(chi_square_sf(null.deviance - full.deviance, 1), abs=1e-14)

    def test_zero_drop(self):
        null, _ = self._nested()
        assert likelihood_ratio_test(null, null, 1) == 1.0

    def test_reversed_models_raise(self):
        null, full = self._nested()
        if null.deviance - full.deviance > 1e-6:
            with pytest.raises(NegativeDevianceDrop):
                likelihood_ratio_test(full, null, 1)

    def test_family_mismatch(self):
        a = fit_glm(ones(4), [0.0, 1, 1, 0], "poisson-log")
        b = fit_glm(ones(4), [0.0, 1, 1, 0], "binomial-logit")
        with pytest.raises(ValueError):
            likelihood_ratio_test(a, b, 1)


design_shapes = st.tuples(st.integers(8, 50), st.integers(1, 5), st.integers(0, 2**31 - 1))


@settings(max_examples=60, deadline=None)
@given(design_shapes)
def test_gaussian_equals_normal_equations(shape):
    n, p, seed = shape
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    y = rng.normal(size=n) * 3 + 1
    fit = fit_glm(X, y, "gaussian-identity")
    np.testing.assert_allclose(fit.coefficients, ols(X, y), atol=1e-10, rtol=0)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(FAMILIES), st.integers(6, 60), st.integers(0, 2**31 - 1))
def test_intercept_only_is_link_of_mean(family, n, seed):
    rng = np.random.default_rng(seed)
    y = (rng.random(n) < 0.4).astype(float)
    if family == "gaussian-identity":
        y = y + rng.normal(size=n)
    if family != "gaussian-identity" and (y.sum() == 0 or y.sum() == n):
        return
    fit = fit_glm(ones(n), y, family)
    assert fit.coefficients[0] == pytest.approx(LinkFamily.parse(family).link(y.mean()), abs=1e-8)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(FAMILIES), st.integers(20, 60), st.integers(0, 2**31 - 1))
def test_nested_deviance_never_increases(family, n, seed):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, 3))])
    y = (rng.random(n) < 0.3).astype(float)
    if y.sum() in (0, n):
        return
    full = fit_glm(X, y, family)
    null = fit_glm(X[:, :2], y, family)
    if full.converged and null.converged:
        assert full.deviance <= null.deviance + 1e-8
