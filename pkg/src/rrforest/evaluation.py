"""Omnibus tests for treatment effect heterogeneity in forest predictions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data import TrialDataset
from .glm import GlmError, LinkFamily, fit_glm, likelihood_ratio_test

DEGENERATE_VARIANCE = 1e-12


class OmnibusError(RuntimeError):
    """A nested GLM in an omnibus test could not be fitted."""


@dataclass(frozen=True)
class CalibrationResult:
    alpha: float
    beta: float
    alpha_p: float
    beta_p: float
    degenerate: bool = False

    def to_dict(self):
        return {"alpha": self.alpha, "beta": self.beta,
                "alpha_p": self.alpha_p, "beta_p": self.beta_p}


@dataclass(frozen=True)
class AnovaResult:
    deviance_drop: float
    df: int
    p_value: float
    degenerate: bool = False

    def to_dict(self):
        return {"deviance_drop": self.deviance_drop, "df": self.df,
                "p_value": self.p_value, "degenerate": self.degenerate}


def _design(X, *columns):
    X = np.asarray(X, dtype=float)
    scale = X.std(axis=0)
    scale[scale <= 0] = 1.0
    Xs = (X - X.mean(axis=0)) / scale
    extra = [np.asarray(c, dtype=float)[:, None] for c in columns]
    return np.hstack([np.ones((X.shape[0], 1)), Xs, *extra])


def center_data(dataset: TrialDataset, folds=5, family="poisson-log", seed=0):
    """Covariate-adjusted outcome and treatment vectors.

    ``w_tilde = w - mean(w)`` (randomised treatment); ``y_tilde = y - yhat``
    where ``yhat`` comes from a GLM of ``y`` on ``X`` fitted on the other folds.
    """
    if folds < 2:
        raise ValueError("need at least two folds")
    family = LinkFamily.parse(family)
    n = dataset.n
    rng = np.random.default_rng(seed)
    fold_of = rng.permutation(n) % folds
    design = _design(dataset.X)
    yhat = np.empty(n)
    for f in range(folds):
        held = fold_of == f
        train = ~held
        try:
            fit = fit_glm(design[train], dataset.y[train], family)
            yhat[held] = fit.predict(design[held])
        except GlmError:
            yhat[held] = dataset.y[train].mean()
    w_tilde = dataset.w - dataset.w.mean()
    return dataset.y - yhat, w_tilde


def _hc3_ols(Xr, y):
    """OLS coefficients with HC3 standard errors; no intercept added."""
    XtX_inv = np.linalg.inv(Xr.T @ Xr)
    coef = XtX_inv @ (Xr.T @ y)
    resid = y - Xr @ coef
    leverage = np.einsum("ij,jk,ik->i", Xr, XtX_inv, Xr)
    u = resid / np.maximum(1.0 - leverage, 1e-12)
    meat = (Xr * u[:, None] ** 2).T @ Xr
    cov = XtX_inv @ meat @ XtX_inv
    return coef, np.sqrt(np.maximum(np.diag(cov), 0.0))


def _one_sided(estimate, se, df):
    if not (se > 0) or not math.isfinite(se):
        return 1.0
    return float(stats.t.sf(estimate / se, df))


def test_calibration(estimates, y_tilde, w_tilde) -> CalibrationResult:
    """Best-linear-predictor calibration test.

    Regresses ``y_tilde`` on ``w_tilde * tau_bar`` and
    ``w_tilde * (tau_hat - tau_bar)`` without intercept. p-values are
    one-sided (coefficient > 0) with HC3 standard errors.
    """
    tau = np.asarray(estimates.tau_rd, dtype=float)
    tau_bar = float(estimates.tau_bar_rd)
    y_tilde = np.asarray(y_tilde, dtype=float)
    w_tilde = np.asarray(w_tilde, dtype=float)
    if not (tau.shape == y_tilde.shape == w_tilde.shape):
        raise ValueError("estimates, y_tilde and w_tilde must have the same length")
    mean_reg = w_tilde * tau_bar
    diff = tau - tau_bar
    degenerate = bool(np.var(diff) < DEGENERATE_VARIANCE)
    present = [bool(np.any(mean_reg != 0)), not degenerate]
    regressors = [r for r, keep in zip((mean_reg, w_tilde * diff), present) if keep]
    results = [(0.0, 1.0), (0.0, 1.0)]
    if regressors:
        Xr = np.column_stack(regressors)
        coef, se = _hc3_ols(Xr, y_tilde)
        df = len(y_tilde) - Xr.shape[1]
        fitted = iter(zip(coef, se))
        for slot, keep in enumerate(present):
            if keep:
                c, s = next(fitted)
                results[slot] = (float(c), _one_sided(c, s, df))
    (alpha, alpha_p), (beta, beta_p) = results
    return CalibrationResult(alpha, beta, alpha_p, beta_p, degenerate=degenerate)


test_calibration.__test__ = False


def _nested_lrt(dataset: TrialDataset, extra, what):
    extra = np.asarray(extra, dtype=float)
    if extra.shape != (dataset.n,):
        raise ValueError(f"{what} must have one value per row")
    if not np.all(np.isfinite(extra)):
        raise ValueError(f"{what} must be finite")
    null_design = _design(dataset.X, dataset.w)
    if np.var(extra) < DEGENERATE_VARIANCE * max(1.0, float(np.mean(extra ** 2))):
        return AnovaResult(0.0, 1, 1.0, degenerate=True)
    full_design = np.column_stack([null_design, extra])
    try:
        null = fit_glm(null_design, dataset.y, LinkFamily.POISSON)
        full = fit_glm(full_design, dataset.y, LinkFamily.POISSON,
                       start=np.append(null.coefficients, 0.0))
    except GlmError as exc:
        raise OmnibusError(f"omnibus GLM failed for {what} on {dataset.n} rows: {exc}") from exc
    if not (null.converged and full.converged):
        raise OmnibusError(
            f"omnibus GLM did not converge for {what}: null iterations={null.iterations}, "
            f"full iterations={full.iterations}"
        )
    p = likelihood_ratio_test(null, full, 1)
    drop = max(null.deviance - full.deviance, 0.0)
    return AnovaResult(float(drop), 1, float(p))


def anova_omnibus(test_set: TrialDataset, tau_rr) -> AnovaResult:
    """Likelihood-ratio test of adding ``log(tau_rr)`` to Poisson ``y ~ X + w``."""
    tau_rr = np.asarray(tau_rr, dtype=float)
    if np.any(tau_rr <= 0):
        raise ValueError("tau_rr must be strictly positive")
    return _nested_lrt(test_set, np.log(tau_rr), "log(tau_rr)")


def oracle_power_test(test_set: TrialDataset, t_indicator) -> AnovaResult:
    """Likelihood-ratio test of adding the true effect-group indicator."""
    return _nested_lrt(test_set, np.asarray(t_indicator, dtype=float), "t_indicator")
