"""Compiled IRLS kernels shared by the public GLM API and the split scorer.

All three supported families use their canonical link, so Fisher scoring and
Newton-Raphson coincide: the information matrix is ``D' diag(V(mu)) D`` and
the score is ``D' (y - mu)``.
"""

import math

import numpy as np
from numba import njit

GAUSSIAN = 0
BINOMIAL = 1
POISSON = 2

CONVERGED = 0
MAX_ITER = 1
SINGULAR = 2
SEPARATED = 3
NOT_FINITE = 4

SEPARATION_BOUND = 30.0
_ETA_MAX = 700.0
_MU_EPS = 1e-15


@njit(cache=True)
def _inverse_link(family, eta):
    if family == POISSON:
        return math.exp(min(eta, _ETA_MAX))
    if family == BINOMIAL:
        if eta >= 0:
            mu = 1.0 / (1.0 + math.exp(-eta))
        else:
            e = math.exp(eta)
            mu = e / (1.0 + e)
        return min(max(mu, _MU_EPS), 1.0 - _MU_EPS)
    return eta


@njit(cache=True)
def _variance(family, mu):
    if family == POISSON:
        return mu
    if family == BINOMIAL:
        return mu * (1.0 - mu)
    return 1.0


@njit(cache=True)
def _unit_deviance(family, y, mu):
    if family == POISSON:
        if y > 0:
            return 2.0 * (y * math.log(y / mu) - (y - mu))
        return 2.0 * mu
    if family == BINOMIAL:
        d = 0.0
        if y > 0:
            d += y * math.log(y / mu)
        if y < 1:
            d += (1.0 - y) * math.log((1.0 - y) / (1.0 - mu))
        return 2.0 * d
    r = y - mu
    return r * r


@njit(cache=True)
def _update_fit(D, y, family, beta, eta, mu):
    n = D.shape[0]
    eta[:] = np.dot(D, beta)
    dev = 0.0
    for i in range(n):
        mu[i] = _inverse_link(family, eta[i])
        dev += _unit_deviance(family, y[i], mu[i])
    return dev


@njit(cache=True)
def _accumulate(D, y, family, mu, gram, score, ridge, Dw):
    """Information matrix ``D' V D + ridge I`` and score ``D' (y - mu)``."""
    n, p = D.shape
    for a in range(p):
        score[a] = 0.0
    for i in range(n):
        v = _variance(family, mu[i])
        r = y[i] - mu[i]
        for a in range(p):
            da = D[i, a]
            score[a] += da * r
            Dw[i, a] = da * v
    gram[:, :] = np.dot(Dw.T, D)
    for a in range(p):
        gram[a, a] += ridge


@njit(cache=True)
def _cholesky(gram, chol):
    """Lower Cholesky factor from the upper triangle of ``gram``.

    Returns False when a pivot is non-positive or non-finite.
    """
    p = gram.shape[0]
    for j in range(p):
        s = gram[j, j]
        for k in range(j):
            s -= chol[j, k] * chol[j, k]
        if not (s > 0.0) or not math.isfinite(s):
            return False
        ljj = math.sqrt(s)
        chol[j, j] = ljj
        for i in range(j + 1, p):
            s = gram[j, i]
            for k in range(j):
                s -= chol[i, k] * chol[j, k]
            chol[i, j] = s / ljj
        for i in range(j):
            chol[i, j] = 0.0
    return True


@njit(cache=True)
def _chol_solve(chol, rhs, out):
    p = chol.shape[0]
    for i in range(p):
        s = rhs[i]
        for k in range(i):
            s -= chol[i, k] * out[k]
        out[i] = s / chol[i, i]
    for i in range(p - 1, -1, -1):
        s = out[i]
        for k in range(i + 1, p):
            s -= chol[k, i] * out[k]
        out[i] = s / chol[i, i]


@njit(cache=True)
def _initial_beta(D, y, family, beta, gram, chol, rhs, ridge, Dw):
    """Weighted least-squares start from the usual data-based mean guess."""
    n, p = D.shape
    for a in range(p):
        rhs[a] = 0.0
    for i in range(n):
        if family == POISSON:
            m = y[i] + 0.1
            eta0 = math.log(m)
        elif family == BINOMIAL:
            m = (y[i] + 0.5) / 2.0
            eta0 = math.log(m / (1.0 - m))
        else:
            m = y[i]
            eta0 = m
        v = _variance(family, m)
        z = eta0 + (y[i] - m) / v
        for a in range(p):
            dv = D[i, a] * v
            rhs[a] += dv * z
            Dw[i, a] = dv
    gram[:, :] = np.dot(Dw.T, D)
    for a in range(p):
        gram[a, a] += ridge
    if not _cholesky(gram, chol):
        return False
    _chol_solve(chol, rhs, beta)
    return True


@njit(cache=True)
def irls(D, y, family, beta, warm, max_iter, tol, ridge, polish, final_info,
         eta, mu, gram, chol, score, step, trial, Dw):
    """Fit a canonical-link GLM in place.

    ``beta`` holds the start when ``warm`` is true and the solution on exit.
    With ``final_info`` set, ``gram``/``chol`` hold the information matrix and
    its factor at the returned ``beta``; otherwise they are from the last
    Newton step. Returns ``(status, iterations, deviance)``.
    """
    n, p = D.shape
    if not warm:
        if not _initial_beta(D, y, family, beta, gram, chol, score, ridge, Dw):
            return SINGULAR, 0, np.inf
    dev = _update_fit(D, y, family, beta, eta, mu)
    if not math.isfinite(dev):
        return NOT_FINITE, 0, dev

    status = MAX_ITER
    iters = 0
    extra = 1 if polish else 0
    while iters < max_iter:
        _accumulate(D, y, family, mu, gram, score, ridge, Dw)
        if not _cholesky(gram, chol):
            return SINGULAR, iters, dev
        _chol_solve(chol, score, step)
        for a in range(p):
            trial[a] = beta[a]
        scale = 1.0
        new_dev = np.inf
        for _ in range(20):
            for a in range(p):
                beta[a] = trial[a] + scale * step[a]
            new_dev = _update_fit(D, y, family, beta, eta, mu)
            if math.isfinite(new_dev) and new_dev <= dev * (1.0 + 1e-12) + 1e-12:
                break
            scale *= 0.5
        iters += 1
        if not math.isfinite(new_dev):
            return NOT_FINITE, iters, new_dev
        change = abs(new_dev - dev) / (abs(new_dev) + 0.1)
        dev = new_dev
        if family == BINOMIAL:
            for a in range(p):
                if abs(beta[a]) > SEPARATION_BOUND:
                    _accumulate(D, y, family, mu, gram, score, ridge, Dw)
                    _cholesky(gram, chol)
                    return SEPARATED, iters, dev
        if status == CONVERGED:
            extra -= 1
            if extra <= 0:
                break
        elif change < tol:
            status = CONVERGED
            if extra <= 0:
                break
    if final_info:
        _accumulate(D, y, family, mu, gram, score, ridge, Dw)
        if not _cholesky(gram, chol):
            return SINGULAR, iters, dev
    return status, iters, dev


@njit(cache=True)
def inverse_diagonal(chol, out, unit, col):
    """Diagonal of the inverse information matrix from its Cholesky factor."""
    p = chol.shape[0]
    for j in range(p):
        for a in range(p):
            unit[a] = 0.0
        unit[j] = 1.0
        _chol_solve(chol, unit, col)
        out[j] = col[j]


@njit(cache=True)
def inverse_entry(chol, j, unit, col):
    p = chol.shape[0]
    for a in range(p):
        unit[a] = 0.0
    unit[j] = 1.0
    _chol_solve(chol, unit, col)
    return col[j]
