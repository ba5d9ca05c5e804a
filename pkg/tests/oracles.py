"""Independent reference computations used to check the library.

None of these call into ``rrforest``; they use plain Newton iterations on
the log-likelihood and adaptive quadrature on densities.
"""

import math

import numpy as np
from scipy import integrate


def _loglik_parts(family, X, y, beta):
    eta = X @ beta
    if family == "poisson-log":
        mu = np.exp(eta)
        grad = X.T @ (y - mu)
        hess = -(X * mu[:, None]).T @ X
        ll = float(np.sum(y * eta - mu))
    elif family == "binomial-logit":
        mu = 1.0 / (1.0 + np.exp(-eta))
        grad = X.T @ (y - mu)
        hess = -(X * (mu * (1 - mu))[:, None]).T @ X
        ll = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    elif family == "gaussian-identity":
        r = y - eta
        grad = X.T @ r
        hess = -X.T @ X
        ll = float(-0.5 * np.sum(r * r))
    else:
        raise ValueError(family)
    return ll, grad, hess


def newton_mle(family, X, y, iters=200):
    """Maximise the log-likelihood by damped Newton steps until stationary."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    beta = np.zeros(X.shape[1])
    if family == "poisson-log":
        beta[0] = math.log(max(y.mean(), 1e-3))
    ll, grad, hess = _loglik_parts(family, X, y, beta)
    for _ in range(iters):
        step = np.linalg.solve(-hess, grad)
        t = 1.0
        while True:
            cand = beta + t * step
            ll_new, g_new, h_new = _loglik_parts(family, X, y, cand)
            if ll_new >= ll - 1e-12 or t < 1e-10:
                break
            t *= 0.5
        beta, ll, grad, hess = cand, ll_new, g_new, h_new
        if np.max(np.abs(t * step)) < 1e-14:
            break
    return beta


def normal_two_sided_p(z):
    """``2 * P(Z > |z|)`` by integrating the standard normal density."""
    density = lambda t: math.exp(-0.5 * t * t) / math.sqrt(2 * math.pi)
    tail, _ = integrate.quad(density, abs(z), math.inf, epsabs=1e-14, epsrel=1e-12)
    return 2.0 * tail


def chi_square_tail(x, df):
    """``P(X > x)`` for a chi-square variable, by integrating its density."""
    k = df / 2.0
    log_norm = -k * math.log(2.0) - math.lgamma(k)

    def density(t):
        if t <= 0:
            return 0.0
        return math.exp(log_norm + (k - 1) * math.log(t) - t / 2.0)

    if x <= 0:
        return 1.0
    # integrate the lighter side and complement if needed; the df=1 density
    # has an integrable singularity at zero, which quad handles via 'alg' weights
    mode = max(df - 2.0, 0.0)
    if x > mode + 1:
        tail, _ = integrate.quad(density, x, math.inf, epsabs=1e-14, epsrel=1e-12, limit=200)
        return tail
    if df == 1:
        head, _ = integrate.quad(
            lambda t: math.exp(log_norm - t / 2.0), 0.0, x,
            weight="alg", wvar=(-0.5, 0.0), epsabs=1e-14, epsrel=1e-12,
        )
    else:
        head, _ = integrate.quad(density, 0.0, x, epsabs=1e-14, epsrel=1e-12, limit=200)
    return 1.0 - head


def ols(X, y):
    X = np.asarray(X, dtype=float)
    return np.linalg.solve(X.T @ X, X.T @ np.asarray(y, dtype=float))
