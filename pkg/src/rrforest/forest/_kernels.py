"""Compiled honest-tree growth with GLM-interaction split scoring."""

import math

import numpy as np
from numba import njit

from .._irls import (
    BINOMIAL,
    CONVERGED,
    GAUSSIAN,
    MAX_ITER,
    NOT_FINITE,
    SEPARATED,
    SEPARATION_BOUND,
    SINGULAR,
    _accumulate,
    _chol_solve,
    _cholesky,
    _update_fit,
    _variance,
    inverse_entry,
    irls,
)


@njit(cache=True)
def _splitmix64(state):
    state = state + np.uint64(0x9E3779B97F4A7C15)
    z = state
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    return state, z


@njit(cache=True)
def _draw_features(state, d, mtry, out):
    """Partial Fisher-Yates: first ``mtry`` entries of ``out`` are the draw."""
    for j in range(d):
        out[j] = j
    for j in range(mtry):
        state, r = _splitmix64(state)
        pick = j + np.int64(r % np.uint64(d - j))
        tmp = out[j]
        out[j] = out[pick]
        out[pick] = tmp
    return state


@njit(cache=True)
def candidate_thresholds(v, max_cand, out):
    """Thresholds for sorted values ``v``; returns how many were written.

    Midpoints between consecutive distinct values, or, when there are more
    than ``max_cand`` distinct values, midpoints straddling the
    k/(max_cand+1) empirical quantiles for k = 1..max_cand.
    """
    n = v.shape[0]
    if n < 2:
        return 0
    distinct = 1
    for i in range(1, n):
        if v[i] > v[i - 1]:
            distinct += 1
    count = 0
    if distinct <= max_cand:
        for i in range(1, n):
            if v[i] > v[i - 1]:
                out[count] = 0.5 * (v[i - 1] + v[i])
                count += 1
        return count
    last = -np.inf
    for k in range(1, max_cand + 1):
        r = (k * n) // (max_cand + 1)
        if r < 1:
            r = 1
        if r > n - 1:
            r = n - 1
        lo = v[r - 1]
        hi_idx = r
        while hi_idx < n and v[hi_idx] <= lo:
            hi_idx += 1
        if hi_idx >= n:
            continue
        t = 0.5 * (lo + v[hi_idx])
        if t > last:
            out[count] = t
            count += 1
            last = t
    return count


@njit(cache=True)
def _fill_base(D, X_std, Z, y, w, rows, use_z, yv):
    n = rows.shape[0]
    d = X_std.shape[1]
    for i in range(n):
        r = rows[i]
        D[i, 0] = 1.0
        if use_z:
            D[i, 1] = Z[r]
            c = 2
        else:
            for j in range(d):
                D[i, 1 + j] = X_std[r, j]
            c = 1 + d
        D[i, c] = w[r]
        yv[i] = y[r]


@njit(cache=True)
def _assemble(G00, r0, pb, pwb, py, pwy, nl, nI, q, width, G, rhs):
    """Weighted normal equations for ``[base, s(, s*w)]`` from sorted-order sums.

    ``s`` marks rows at sorted positions ``>= nl``. ``width`` is ``q + 2``
    with the interaction column or ``q + 1`` without. The treatment indicator
    is binary, so ``(s*w)^2 = s*w`` and its sums come from ``pwb``.
    """
    for a in range(q):
        for b in range(q):
            G[a, b] = G00[a, b]
        rhs[a] = r0[a]
        G[a, q] = pb[nI, a] - pb[nl, a]
        G[q, a] = G[a, q]
    G[q, q] = pb[nI, 0] - pb[nl, 0]
    rhs[q] = py[nI] - py[nl]
    if width > q + 1:
        n_sw = pwb[nI, 0] - pwb[nl, 0]
        for a in range(q):
            G[a, q + 1] = pwb[nI, a] - pwb[nl, a]
            G[q + 1, a] = G[a, q + 1]
        G[q, q + 1] = n_sw
        G[q + 1, q] = n_sw
        G[q + 1, q + 1] = n_sw
        rhs[q + 1] = pwy[nI] - pwy[nl]


@njit(cache=True)
def _gaussian_fit(G00, r0, yy, pb, pwb, py, pwy, nl, nI, q, ridge, width,
                  G, rhs, chol, beta, res, delta):
    """Least squares for ``y ~ [base, s(, s*w)]`` from sorted-order sums.

    Solves the ridged normal equations, applies one refinement step so the
    result is the unridged least-squares fit (the fixed point IRLS would
    reach), and returns the residual sum of squares, or -1 when the system
    is singular.
    """
    _assemble(G00, r0, pb, pwb, py, pwy, nl, nI, q, width, G, rhs)
    Gv = G[:width, :width]
    cv = chol[:width, :width]
    for a in range(width):
        Gv[a, a] += ridge
    ok = _cholesky(Gv, cv)
    for a in range(width):
        Gv[a, a] -= ridge
    if not ok:
        return -1.0
    bv = beta[:width]
    _chol_solve(cv, rhs[:width], bv)
    for a in range(width):
        acc = rhs[a]
        for b in range(width):
            acc -= Gv[a, b] * bv[b]
        res[a] = acc
    _chol_solve(cv, res[:width], delta[:width])
    rss = yy
    for a in range(width):
        bv[a] += delta[a]
        rss -= 2.0 * bv[a] * rhs[a]
    for a in range(width):
        acc = 0.0
        for b in range(width):
            acc += Gv[a, b] * bv[b]
        rss += bv[a] * acc
    return max(rss, 0.0)



@njit(cache=True)
def _warm_fit(D, yv, family, beta, beta_base, q, width, nI, nl, G00, r0, pb, pwb,
              py, pwy, dev_base, max_iter, tol, ridge, eta, mu, gram, chol, score,
              step, trial, Dw):
    """IRLS from the base fit with the split columns at zero.

    At that start the working weights and residuals are the node's base-fit
    ones, so the first Newton step comes from the weighted sorted-order sums
    in O(width^3). Later steps are ordinary IRLS iterations with the same
    stopping, step-halving and separation rules as :func:`irls`.
    Returns ``(status, deviance)``.
    """
    _assemble(G00, r0, pb, pwb, py, pwy, nl, nI, q, width, gram, score)
    for a in range(width):
        gram[a, a] += ridge
    for a in range(q):
        beta[a] = beta_base[a]
    for a in range(q, width):
        beta[a] = 0.0
    dev = dev_base
    for it in range(max_iter):
        if it > 0:
            _accumulate(D, yv, family, mu, gram, score, ridge, Dw)
        if not _cholesky(gram, chol):
            return SINGULAR, dev
        _chol_solve(chol, score, step)
        for a in range(width):
            trial[a] = beta[a]
        scale = 1.0
        new_dev = np.inf
        for _ in range(20):
            for a in range(width):
                beta[a] = trial[a] + scale * step[a]
            new_dev = _update_fit(D, yv, family, beta, eta, mu)
            if math.isfinite(new_dev) and new_dev <= dev * (1.0 + 1e-12) + 1e-12:
                break
            scale *= 0.5
        if not math.isfinite(new_dev):
            return NOT_FINITE, new_dev
        change = abs(new_dev - dev) / (abs(new_dev) + 0.1)
        dev = new_dev
        if family == BINOMIAL:
            for a in range(width):
                if abs(beta[a]) > SEPARATION_BOUND:
                    return SEPARATED, dev
        # always take one full IRLS step after the shared first step
        if it > 0 and change < tol:
            return CONVERGED, dev
    return MAX_ITER, dev


@njit(cache=True)
def _glm_z(D, D0, yv, family, beta, beta0, beta_base, warm, q, p, nI, nl, statistic,
           max_iter, tol, ridge, G00, r0, pb, pwb, py, pwy, dev_base, eta, mu, gram,
           chol, score, step, trial, Dw, gram0, chol0, score0, step0, trial0, Dw0,
           unit, col):
    """Signed interaction statistic from an IRLS fit; NaN when unusable.

    Used for the Poisson and binomial families (gaussian has a closed form).
    """
    if warm:
        status, dev = _warm_fit(D, yv, family, beta, beta_base, q, p, nI, nl, G00, r0,
                                pb, pwb, py, pwy, dev_base, max_iter, tol, ridge, eta,
                                mu, gram, chol, score, step, trial, Dw)
    else:
        status, _, dev = irls(D, yv, family, beta, False, max_iter, tol, ridge,
                              False, False, eta, mu, gram, chol, score, step, trial, Dw)
    if status != CONVERGED:
        return np.nan
    if statistic == 1:
        if warm:
            status0, dev0 = _warm_fit(D0, yv, family, beta0, beta_base, q, p - 1, nI, nl,
                                      G00, r0, pb, pwb, py, pwy, dev_base, max_iter, tol,
                                      ridge, eta, mu, gram0, chol0, score0, step0,
                                      trial0, Dw0)
        else:
            status0, _, dev0 = irls(D0, yv, family, beta0, False, max_iter, tol, ridge,
                                    False, False, eta, mu, gram0, chol0, score0, step0,
                                    trial0, Dw0)
        if status0 != CONVERGED:
            return np.nan
        drop = dev0 - dev
        if drop < 0.0:
            drop = 0.0
        return math.copysign(math.sqrt(drop), beta[q + 1])
    var = inverse_entry(chol, q + 1, unit, col)
    if not (var > 0.0) or not math.isfinite(var):
        return np.nan
    return beta[q + 1] / math.sqrt(var)


@njit(cache=True)
def _best_split(X, X_std, Z, y, w, I, J, family, k, mtry, max_cand, use_z,
                statistic, max_iter, tol, ridge, state, feats):
    """Search ``mtry`` random features; returns the best valid split.

    ``statistic`` 0 scores candidates by the Wald z of the interaction term,
    1 by the signed root of its likelihood-ratio statistic.
    Output ``(state, feature, threshold, z, found, n_scored)``.
    """
    nI = I.shape[0]
    nJ = J.shape[0]
    d = X.shape[1]
    q = 3 if use_z else d + 2
    p = q + 2
    base = np.empty((nI, q))
    yv = np.empty(nI)
    _fill_base(base, X_std, Z, y, w, I, use_z, yv)
    D = np.empty((nI, p))
    for i in range(nI):
        for a in range(q):
            D[i, a] = base[i, a]

    eta = np.empty(nI)
    mu = np.empty(nI)
    gram = np.empty((p, p))
    chol = np.zeros((p, p))
    score = np.empty(p)
    step = np.empty(p)
    trial = np.empty(p)
    unit = np.empty(p)
    col = np.empty(p)
    Dw = np.empty((nI, p))
    # reduced model without the interaction, for the likelihood-ratio option
    D0 = np.empty((nI, p - 1))
    if statistic == 1:
        for i in range(nI):
            for a in range(q):
                D0[i, a] = base[i, a]
    beta0 = np.empty(p - 1)
    gram0 = np.empty((p - 1, p - 1))
    chol0 = np.zeros((p - 1, p - 1))
    score0 = np.empty(p - 1)
    step0 = np.empty(p - 1)
    trial0 = np.empty(p - 1)
    Dw0 = np.empty((nI, p - 1))

    gaussian = family == GAUSSIAN
    pb = np.zeros((nI + 1, q))
    pwb = np.zeros((nI + 1, q))
    py = np.zeros(nI + 1)
    pwy = np.zeros(nI + 1)
    res = np.empty(p)
    delta = np.empty(p)
    rhs = np.empty(p)

    beta_base = np.zeros(q)
    status, _, dev_base = irls(base, yv, family, beta_base, False, max_iter, tol, ridge,
                               False, False, eta, mu, np.empty((q, q)), np.zeros((q, q)),
                               np.empty(q), np.empty(q), np.empty(q), np.empty((nI, q)))
    warm = status == CONVERGED
    beta = np.empty(p)

    # Candidate normal equations follow from sorted-order sums of
    # ``v * base`` and ``v * target``: unit weights and y for least squares,
    # base-fit variances and residuals for the first warm IRLS step.
    vv = np.ones(nI)
    tv = yv.copy()
    if not gaussian and warm:
        for i in range(nI):
            vv[i] = _variance(family, mu[i])
            tv[i] = yv[i] - mu[i]
    vbase = np.empty((nI, q))
    for i in range(nI):
        for a in range(q):
            vbase[i, a] = vv[i] * base[i, a]
    G00 = np.dot(vbase.T, base)
    r0 = np.dot(base.T, tv)
    yy = np.dot(yv, yv)
    use_sums = gaussian or warm

    state = _draw_features(state, d, mtry, feats)

    vals = np.empty(nI)
    arm = np.empty(nI)
    ev = np.empty(nI)
    jvals = np.empty(nJ)
    jarm = np.empty(nJ)
    thr = np.empty(max_cand + nI)
    cum_t = np.zeros(nI + 1, np.int64)
    cum_te = np.zeros(nI + 1, np.int64)
    cum_ce = np.zeros(nI + 1, np.int64)
    jcum_t = np.zeros(nJ + 1, np.int64)

    tot_t = 0
    tot_te = 0
    tot_ce = 0
    for i in range(nI):
        if w[I[i]] > 0.5:
            tot_t += 1
            if y[I[i]] > 0.5:
                tot_te += 1
        elif y[I[i]] > 0.5:
            tot_ce += 1
    tot_c = nI - tot_t
    jt = 0
    for i in range(nJ):
        if w[J[i]] > 0.5:
            jt += 1
    jc = nJ - jt

    best_f = -1
    best_t = 0.0
    best_z = 0.0
    found = False
    n_scored = 0

    for fi in range(mtry):
        f = feats[fi]
        order = np.argsort(X[I, f], kind="mergesort")
        for i in range(nI):
            r = I[order[i]]
            vals[i] = X[r, f]
            arm[i] = w[r]
            ev[i] = y[r]
        if use_sums:
            for i in range(nI):
                row = order[i]
                wi = base[row, q - 1]
                for a in range(q):
                    pb[i + 1, a] = pb[i, a] + vbase[row, a]
                    pwb[i + 1, a] = pwb[i, a] + wi * vbase[row, a]
                py[i + 1] = py[i] + tv[row]
                pwy[i + 1] = pwy[i] + wi * tv[row]
        for i in range(nI):
            t_i = 1 if arm[i] > 0.5 else 0
            e_i = 1 if ev[i] > 0.5 else 0
            cum_t[i + 1] = cum_t[i] + t_i
            cum_te[i + 1] = cum_te[i] + t_i * e_i
            cum_ce[i + 1] = cum_ce[i] + (1 - t_i) * e_i
        jorder = np.argsort(X[J, f], kind="mergesort")
        for i in range(nJ):
            r = J[jorder[i]]
            jvals[i] = X[r, f]
            jarm[i] = w[r]
        for i in range(nJ):
            jcum_t[i + 1] = jcum_t[i] + (1 if jarm[i] > 0.5 else 0)

        n_thr = candidate_thresholds(vals, max_cand, thr)
        for ci in range(n_thr):
            t = thr[ci]
            nl = np.searchsorted(vals, t, side="right")
            lt = cum_t[nl]
            lc = nl - lt
            rt = tot_t - lt
            rc = tot_c - lc
            if lt < k or lc < k or rt < k or rc < k:
                continue
            jl = np.searchsorted(jvals, t, side="right")
            jlt = jcum_t[jl]
            jlc = jl - jlt
            if jlt < k or jlc < k or jt - jlt < k or jc - jlc < k:
                continue
            if family != GAUSSIAN:
                lte = cum_te[nl]
                lce = cum_ce[nl]
                rte = tot_te - lte
                rce = tot_ce - lce
                if lte == 0 or lce == 0 or rte == 0 or rce == 0:
                    continue
                if family == BINOMIAL:
                    if lte == lt or lce == lc or rte == rt or rce == rc:
                        continue
            if gaussian:
                n_scored += 1
                if nI <= p:
                    continue
                dev = _gaussian_fit(G00, r0, yy, pb, pwb, py, pwy, nl, nI, q, ridge, p,
                                    gram, rhs, chol, beta, res, delta)
                if dev < 0.0:
                    continue
                dispersion = dev / (nI - p)
                if statistic == 1:
                    dev0 = _gaussian_fit(G00, r0, yy, pb, pwb, py, pwy, nl, nI, q, ridge,
                                         p - 1, gram0, rhs, chol0, beta0, res, delta)
                    if dev0 < 0.0:
                        continue
                    drop = (dev0 - dev) / dispersion
                    if drop < 0.0:
                        drop = 0.0
                    z = math.copysign(math.sqrt(drop), beta[q + 1])
                else:
                    var = inverse_entry(chol, q + 1, unit, col) * dispersion
                    if not (var > 0.0) or not math.isfinite(var):
                        continue
                    z = beta[q + 1] / math.sqrt(var)
            else:
                for i in range(nI):
                    r = I[i]
                    s = 1.0 if X[r, f] > t else 0.0
                    D[i, q] = s
                    D[i, q + 1] = s * w[r]
                    D0[i, q] = s
                z = _glm_z(D, D0, yv, family, beta, beta0, beta_base, warm, q, p, nI, nl,
                           statistic, max_iter, tol, ridge, G00, r0, pb, pwb, py, pwy,
                           dev_base, eta, mu, gram, chol, score, step, trial, Dw, gram0,
                           chol0, score0, step0, trial0, Dw0, unit, col)
                n_scored += 1
            if not math.isfinite(z):
                continue
            az = abs(z)
            better = False
            if not found:
                better = True
            elif az > abs(best_z):
                better = True
            elif az == abs(best_z):
                if f < best_f or (f == best_f and t < best_t):
                    better = True
            if better:
                found = True
                best_f = f
                best_t = t
                best_z = z
    return state, best_f, best_t, best_z, found, n_scored


@njit(cache=True)
def _partition(rows, start, end, X, f, t):
    """Stable in-place partition of rows[start:end] by X[:, f] <= t."""
    n = end - start
    tmp = np.empty(n, np.int64)
    m = 0
    for i in range(start, end):
        if X[rows[i], f] <= t:
            tmp[m] = rows[i]
            m += 1
    mid = m
    for i in range(start, end):
        if X[rows[i], f] > t:
            tmp[m] = rows[i]
            m += 1
    for i in range(n):
        rows[start + i] = tmp[i]
    return start + mid


@njit(cache=True)
def _arm_counts(rows, start, end, w):
    t = 0
    for i in range(start, end):
        if w[rows[i]] > 0.5:
            t += 1
    return t, (end - start) - t


@njit(cache=True)
def grow_tree_arrays(X, X_std, Z, y, w, rows_I, rows_J, family, k, mtry,
                     max_cand, z_threshold, statistic, seed, max_iter, tol, ridge):
    """Grow one honest tree. Splits see only ``rows_I``; leaves hold ``rows_J``.

    Returns node arrays plus the permuted J rows; leaf ``l`` owns
    ``J[j_start[l]:j_end[l]]``.
    """
    d = X.shape[1]
    I = rows_I.copy()
    J = rows_J.copy()
    cap = 2 * (I.shape[0] + J.shape[0]) + 3
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    depth = np.zeros(cap, np.int64)
    zstat = np.zeros(cap)
    i_start = np.zeros(cap, np.int64)
    i_end = np.zeros(cap, np.int64)
    j_start = np.zeros(cap, np.int64)
    j_end = np.zeros(cap, np.int64)
    feats = np.empty(d, np.int64)
    state = np.uint64(seed)

    i_end[0] = I.shape[0]
    j_end[0] = J.shape[0]
    n_nodes = 1
    stack = np.empty(cap, np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        a, b = i_start[node], i_end[node]
        c, e = j_start[node], j_end[node]
        it, ic = _arm_counts(I, a, b, w)
        jt, jc = _arm_counts(J, c, e, w)
        if it < 2 * k or ic < 2 * k or jt < 2 * k or jc < 2 * k:
            continue
        use_z = (b - a) < z_threshold
        state, f, t, z, found, _ = _best_split(
            X, X_std, Z, y, w, I[a:b], J[c:e], family, k, mtry, max_cand,
            use_z, statistic, max_iter, tol, ridge, state, feats)
        if not found:
            continue
        mid_i = _partition(I, a, b, X, f, t)
        mid_j = _partition(J, c, e, X, f, t)
        feature[node] = f
        threshold[node] = t
        zstat[node] = z
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        left[node] = lnode
        right[node] = rnode
        i_start[lnode], i_end[lnode] = a, mid_i
        j_start[lnode], j_end[lnode] = c, mid_j
        i_start[rnode], i_end[rnode] = mid_i, b
        j_start[rnode], j_end[rnode] = mid_j, e
        depth[lnode] = depth[node] + 1
        depth[rnode] = depth[node] + 1
        stack[sp] = rnode
        sp += 1
        stack[sp] = lnode
        sp += 1
    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes],
            right[:n_nodes], depth[:n_nodes], zstat[:n_nodes],
            j_start[:n_nodes], j_end[:n_nodes], J)


@njit(cache=True)
def apply_trees(X, feature, threshold, left, right, node_offsets, out):
    """Leaf (local node index) reached by every row in every tree."""
    n = X.shape[0]
    n_trees = node_offsets.shape[0] - 1
    for b in range(n_trees):
        off = node_offsets[b]
        for i in range(n):
            node = 0
            while feature[off + node] >= 0:
                if X[i, feature[off + node]] <= threshold[off + node]:
                    node = left[off + node]
                else:
                    node = right[off + node]
            out[b, i] = node


@njit(cache=True)
def forest_sums(X, feature, threshold, left, right, node_offsets, agg,
                j_rows, j_start, j_end, row_offsets, n_train, oob_mask, out,
                support, n_used):
    """Accumulate leaf aggregates for every query row across all trees.

    ``agg[node]`` holds (sum wy, sum w, sum (1-w)y, sum (1-w)) / leaf size, so
    summing over trees and dividing by the tree count gives the forest-weighted
    sums. ``support[i]`` counts distinct training rows with non-zero weight.
    When ``oob_mask`` has rows, tree ``b`` is skipped for query ``i`` if
    ``oob_mask[b, i]`` is true.
    """
    m = X.shape[0]
    n_trees = node_offsets.shape[0] - 1
    skip = oob_mask.shape[0] > 0
    mark = np.zeros(n_train, np.int64)
    for i in range(m):
        for c in range(4):
            out[i, c] = 0.0
        used = 0
        cnt = 0
        for b in range(n_trees):
            if skip and oob_mask[b, i]:
                continue
            off = node_offsets[b]
            node = 0
            while feature[off + node] >= 0:
                if X[i, feature[off + node]] <= threshold[off + node]:
                    node = left[off + node]
                else:
                    node = right[off + node]
            g = off + node
            for c in range(4):
                out[i, c] += agg[g, c]
            used += 1
            ro = row_offsets[b]
            for t in range(j_start[g], j_end[g]):
                r = j_rows[ro + t]
                if mark[r] != i + 1:
                    mark[r] = i + 1
                    cnt += 1
        if used > 0:
            for c in range(4):
                out[i, c] /= used
        support[i] = cnt
        n_used[i] = used
