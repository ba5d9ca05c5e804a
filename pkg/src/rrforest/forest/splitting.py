"""Split candidates and GLM interaction scoring for a single node.

The tree grower uses the compiled batch scorer in ``_kernels``; the functions
here score one candidate at a time through :func:`rrforest.glm.fit_glm` and
serve as the readable reference for that kernel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..glm import GlmError, LinkFamily, fit_glm, wald_p_value
from ._kernels import candidate_thresholds

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SplitScore:
    p_value: float
    z_statistic: float
    valid: bool


INVALID = SplitScore(p_value=1.0, z_statistic=0.0, valid=False)


def enumerate_split_candidates(values, max_candidates=64):
    """Candidate thresholds for one feature at one node.

    Midpoints between consecutive distinct sorted values. When there are more
    than ``max_candidates`` distinct values, only the midpoints straddling the
    ``k / (max_candidates + 1)`` empirical quantiles are kept (deduplicated).
    """
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if max_candidates < 1:
        raise ValueError("max_candidates must be positive")
    out = np.empty(max_candidates + v.size)
    count = candidate_thresholds(v, int(max_candidates), out)
    return out[:count].copy()


def with_intercept(X):
    X = np.asarray(X, dtype=float)
    return np.column_stack([np.ones(X.shape[0]), X])


def compute_baseline_risk(X, y, family="poisson-log"):
    """Coefficients of ``y ~ 1 + X`` used for the baseline-risk projection.

    The projection for any row is ``[1, x] @ beta``. If the fit fails the
    intercept-only fit is returned, padded with zeros.
    """
    family = LinkFamily.parse(family)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    d = X.shape[1]
    degenerate = family is not LinkFamily.GAUSSIAN and (
        not np.any(y > 0) or (family is LinkFamily.BINOMIAL and np.all(y > 0))
    )
    reason = "outcome has no variation, so the MLE does not exist"
    if not degenerate:
        try:
            fit = fit_glm(with_intercept(X), y, family)
            if fit.converged:
                return fit.coefficients
            reason = "did not converge"
        except (GlmError, ValueError) as exc:
            reason = str(exc)
    logger.info("baseline risk fit failed (%s); using intercept only", reason)
    beta = np.zeros(d + 1)
    mean = float(np.mean(y)) if y.size else 0.0
    if family is LinkFamily.GAUSSIAN:
        beta[0] = mean
    elif mean > 0 and not (family is LinkFamily.BINOMIAL and mean >= 1):
        beta[0] = float(family.link(mean))
    return beta


def split_design(X, w, feature_values, threshold, z=None):
    """Design ``[1, X or z, w, s, s*w]`` where ``s = feature > threshold``."""
    s = (np.asarray(feature_values, dtype=float) > threshold).astype(float)
    w = np.asarray(w, dtype=float)
    middle = np.asarray(z, dtype=float)[:, None] if z is not None else np.asarray(X, dtype=float)
    return np.column_stack([np.ones(len(w)), middle, w, s, s * w])


def arm_counts_ok(side, w, k):
    """True when both sides of a split keep ``k`` rows of each arm."""
    side = np.asarray(side, dtype=bool)
    w = np.asarray(w) > 0.5
    return all(
        np.count_nonzero(part & arm) >= k
        for part in (side, ~side)
        for arm in (w, ~w)
    )


def mle_exists(side, w, y, family):
    """False when a split-by-arm cell forces the interaction MLE to infinity.

    Under the log and logit links a cell with no events (or, for the logit
    link, only events) drives its cell-specific coefficient to infinity.
    """
    family = LinkFamily.parse(family)
    if family is LinkFamily.GAUSSIAN:
        return True
    side = np.asarray(side, dtype=bool)
    w = np.asarray(w) > 0.5
    y = np.asarray(y) > 0.5
    for part in (side, ~side):
        for arm in (w, ~w):
            cell = part & arm
            events = np.count_nonzero(y & cell)
            if events == 0:
                return False
            if family is LinkFamily.BINOMIAL and events == np.count_nonzero(cell):
                return False
    return True


def score_split(X_i, y_i, w_i, feature_index, threshold, family="poisson-log", *,
                z_coefficients=None, use_z=False, k=5, w_j=None, x_j=None):
    """Wald test on the split-by-treatment interaction for one candidate.

    Parameters
    ----------
    X_i, y_i, w_i : arrays
        The node's I-sample rows.
    feature_index, threshold : int, float
        Candidate split ``X[:, feature_index] > threshold``.
    z_coefficients : array of shape (d + 1,), optional
        Baseline-risk coefficients; required when ``use_z`` is true.
    k : int
        Minimum rows per treatment arm on each side.
    w_j, x_j : arrays, optional
        Treatment and split-feature values of the node's J-sample rows; when
        given, the per-arm minimum is also enforced on them.
    """
    family = LinkFamily.parse(family)
    X_i = np.asarray(X_i, dtype=float)
    y_i = np.asarray(y_i, dtype=float)
    w_i = np.asarray(w_i, dtype=float)
    feature = X_i[:, feature_index]
    if not arm_counts_ok(feature > threshold, w_i, k):
        return INVALID
    if w_j is not None and not arm_counts_ok(np.asarray(x_j) > threshold, w_j, k):
        return INVALID
    if not mle_exists(feature > threshold, w_i, y_i, family):
        return INVALID
    z = None
    if use_z:
        if z_coefficients is None:
            raise ValueError("use_z requires z_coefficients")
        z = with_intercept(X_i) @ np.asarray(z_coefficients, dtype=float)
    design = split_design(X_i, w_i, feature, threshold, z)
    try:
        fit = fit_glm(design, y_i, family)
    except GlmError:
        return INVALID
    if not fit.converged:
        return INVALID
    wald = wald_p_value(fit, design.shape[1] - 1)
    if wald.degenerate:
        return INVALID
    return SplitScore(p_value=wald.p_value, z_statistic=wald.z_statistic, valid=True)
