"""Generalized linear models fitted by iteratively reweighted least squares.

Only canonical links are supported (identity, logit, log). The fitting
kernel lives in :mod:`rrforest._irls`; this module wraps it with input
validation, standard errors, and the Wald / likelihood-ratio tests used by
the split rule and the omnibus tests.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import _irls

logger = logging.getLogger(__name__)

IRLS_TOL = 1e-8
IRLS_MAX_ITER = 25
RIDGE = 1e-8
DEVIANCE_DROP_TOL = 1e-8


class LinkFamily(str, enum.Enum):
    """Exponential family paired with its canonical link."""

    GAUSSIAN = "gaussian-identity"
    BINOMIAL = "binomial-logit"
    POISSON = "poisson-log"

    @property
    def code(self) -> int:
        return _FAMILY_CODES[self]

    def link(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self is LinkFamily.POISSON:
            return np.log(mu)
        if self is LinkFamily.BINOMIAL:
            return special.logit(mu)
        return mu

    def inverse_link(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self is LinkFamily.POISSON:
            return np.exp(np.minimum(eta, 700.0))
        if self is LinkFamily.BINOMIAL:
            return special.expit(eta)
        return eta

    @classmethod
    def parse(cls, value) -> "LinkFamily":
        if isinstance(value, cls):
            return value
        aliases = {
            "gaussian": cls.GAUSSIAN,
            "identity": cls.GAUSSIAN,
            "binomial": cls.BINOMIAL,
            "logit": cls.BINOMIAL,
            "poisson": cls.POISSON,
            "log": cls.POISSON,
        }
        key = str(value).strip().lower()
        if key in aliases:
            return aliases[key]
        return cls(key)


_FAMILY_CODES = {
    LinkFamily.GAUSSIAN: _irls.GAUSSIAN,
    LinkFamily.BINOMIAL: _irls.BINOMIAL,
    LinkFamily.POISSON: _irls.POISSON,
}


class GlmError(ValueError):
    """Base class for GLM fitting and inference errors."""


class SingularInformation(GlmError):
    """The information matrix is not positive definite even with the ridge."""


class NegativeDevianceDrop(GlmError):
    """The larger model fits worse than its submodel; models are not nested."""


@dataclass(frozen=True)
class GlmFit:
    """Result of :func:`fit_glm`.

    ``dispersion`` is 1 for the binomial and Poisson families and the
    residual mean square for the Gaussian family; standard errors include it.
    """

    coefficients: np.ndarray
    standard_errors: np.ndarray
    deviance: float
    log_likelihood: float
    converged: bool
    iterations: int
    family: LinkFamily
    n_obs: int
    dispersion: float = 1.0
    separated: bool = False

    @property
    def n_params(self) -> int:
        return len(self.coefficients)

    def linear_predictor(self, design) -> np.ndarray:
        return np.asarray(design, dtype=float) @ self.coefficients

    def predict(self, design) -> np.ndarray:
        return self.family.inverse_link(self.linear_predictor(design))


@dataclass(frozen=True)
class WaldResult:
    p_value: float
    z_statistic: float
    degenerate: bool = False


def normal_sf(z):
    """Upper tail of the standard normal distribution."""
    return special.ndtr(-np.asarray(z, dtype=float))


def chi_square_sf(x, df):
    """Upper-tail probability of a chi-square variable with ``df`` degrees."""
    if df < 1:
        raise ValueError(f"df must be a positive integer, got {df}")
    x = np.asarray(x, dtype=float)
    if np.any(np.isnan(x)) or np.any(x < 0):
        raise ValueError("chi-square statistic must be non-negative and not NaN")
    out = special.chdtrc(df, x)
    return float(out) if np.ndim(out) == 0 else out


def _check_design(design, y):
    design = np.ascontiguousarray(design, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    if design.ndim == 1:
        design = design[:, None]
    if design.ndim != 2:
        raise ValueError("design must be a 2-d array")
    n, p = design.shape
    if y.shape != (n,):
        raise ValueError(f"y has shape {y.shape}, expected ({n},)")
    if n < p:
        raise ValueError(f"need at least as many rows as columns, got n={n}, p={p}")
    if not np.all(np.isfinite(design)) or not np.all(np.isfinite(y)):
        raise ValueError("design and y must be finite")
    return design, y


def _log_likelihood(family, y, mu, deviance, n, p):
    if family is LinkFamily.POISSON:
        return float(np.sum(special.xlogy(y, mu) - mu - special.gammaln(y + 1.0)))
    if family is LinkFamily.BINOMIAL:
        return float(np.sum(special.xlogy(y, mu) + special.xlogy(1.0 - y, 1.0 - mu)))
    sigma2 = deviance / n
    if sigma2 <= 0:
        return math.inf
    return float(-0.5 * n * (math.log(2.0 * math.pi * sigma2) + 1.0))


def fit_glm(design, y, family="poisson-log", *, start=None, tol=IRLS_TOL,
            max_iter=IRLS_MAX_ITER, ridge=RIDGE) -> GlmFit:
    """Fit ``y ~ design`` by IRLS.

    Parameters
    ----------
    design : array of shape (n, p)
        Model matrix; include an intercept column yourself.
    y : array of shape (n,)
        Response; non-negative for the Poisson family, binary for the
        binomial family.
    family : LinkFamily or str
    start : array of shape (p,), optional
        Warm start for the coefficients.

    Returns
    -------
    GlmFit
        ``converged`` is False when the iteration cap is hit or the binomial
        fit separates; the fit is still returned.

    Raises
    ------
    SingularInformation
        If the information matrix is singular beyond the ridge safeguard.
    """
    family = LinkFamily.parse(family)
    design, y = _check_design(design, y)
    if family is not LinkFamily.GAUSSIAN and np.any(y < 0):
        raise ValueError(f"{family.value} family needs non-negative y")
    if family is LinkFamily.BINOMIAL and np.any((y != 0) & (y != 1)):
        raise ValueError("binomial family needs y in {0, 1}")
    n, p = design.shape
    beta = np.zeros(p) if start is None else np.array(start, dtype=float)
    eta, mu = np.empty(n), np.empty(n)
    gram, chol = np.empty((p, p)), np.zeros((p, p))
    score, step, trial = np.empty(p), np.empty(p), np.empty(p)

    status, iters, dev = _irls.irls(
        design, y, family.code, beta, start is not None, max_iter, tol, ridge,
        True, True, eta, mu, gram, chol, score, step, trial, np.empty((n, p)),
    )
    if status in (_irls.SINGULAR, _irls.NOT_FINITE):
        raise SingularInformation(
            f"{family.value} fit failed after {iters} iterations (status {status})"
        )
    if status == _irls.MAX_ITER:
        logger.debug("IRLS hit the iteration cap (%d) for %s", max_iter, family.value)

    dispersion = 1.0
    if family is LinkFamily.GAUSSIAN:
        dispersion = dev / (n - p) if n > p else math.nan
    diag = np.empty(p)
    _irls.inverse_diagonal(chol, diag, np.empty(p), np.empty(p))
    se = np.sqrt(np.maximum(diag, 0.0) * dispersion)
    return GlmFit(
        coefficients=beta,
        standard_errors=se,
        deviance=float(max(dev, 0.0)),
        log_likelihood=_log_likelihood(family, y, mu, dev, n, p),
        converged=status == _irls.CONVERGED,
        iterations=int(iters),
        family=family,
        n_obs=n,
        dispersion=float(dispersion),
        separated=status == _irls.SEPARATED,
    )


def wald_p_value(fit: GlmFit, coefficient_index: int) -> WaldResult:
    """Two-sided Wald test that one coefficient is zero."""
    beta = float(fit.coefficients[coefficient_index])
    se = float(fit.standard_errors[coefficient_index])
    if not (se > 0.0) or not math.isfinite(se):
        return WaldResult(p_value=1.0, z_statistic=0.0, degenerate=True)
    z = beta / se
    return WaldResult(p_value=float(2.0 * normal_sf(abs(z))), z_statistic=z)


def likelihood_ratio_test(null_fit: GlmFit, full_fit: GlmFit, df: int) -> float:
    """Likelihood-ratio p-value for nested fits on the same rows.

    For the Gaussian family the deviance drop is scaled by the full model's
    dispersion.
    """
    if null_fit.family is not full_fit.family:
        raise ValueError("fits come from different families")
    if null_fit.n_obs != full_fit.n_obs:
        raise ValueError("fits were computed on different rows")
    if df < 1:
        raise ValueError("df must be positive")
    drop = null_fit.deviance - full_fit.deviance
    scale = max(abs(null_fit.deviance), 1.0)
    if drop < -DEVIANCE_DROP_TOL * scale:
        raise NegativeDevianceDrop(
            f"deviance increased by {-drop:.3g} when adding terms; models not nested?"
        )
    drop = max(drop, 0.0)
    if full_fit.family is LinkFamily.GAUSSIAN:
        drop = drop / full_fit.dispersion if full_fit.dispersion > 0 else math.inf
    return chi_square_sf(drop, df)
