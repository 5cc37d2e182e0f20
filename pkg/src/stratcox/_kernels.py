"""Compiled inner loops for pathwise coordinate descent on the stratified Cox
partial likelihood.  All arrays are in StratumIndex sorted order."""

import numpy as np
from numba import njit

# status codes returned by cd_path
OK = 0
MAX_INNER = 1
MAX_OUTER = 2


@njit(cache=True)
def eta_derivatives(eta, bounds, event, tie_end, grad, w):
    """Log partial likelihood at linear predictor ``eta``.

    Fills ``grad`` with d l / d eta and ``w`` with the diagonal of
    -d^2 l / d eta^2.
    """
    n = eta.shape[0]
    ex = np.empty(n)
    rc = np.empty(n)
    ll = 0.0
    for b in range(bounds.shape[0] - 1):
        lo = bounds[b]
        hi = bounds[b + 1]
        if hi <= lo:
            continue
        m = eta[lo]
        for k in range(lo, hi):
            if eta[k] > m:
                m = eta[k]
        acc = 0.0
        for k in range(hi - 1, lo - 1, -1):
            ex[k] = np.exp(eta[k] - m)
            acc += ex[k]
            rc[k] = acc
        a1 = 0.0
        a2 = 0.0
        k = lo
        while k < hi:
            g_end = tie_end[k]
            d = 0.0
            for j in range(k, g_end):
                if event[j] == 1:
                    d += 1.0
                    ll += eta[j]
            if d > 0.0:
                s0 = rc[k]
                ll -= d * (np.log(s0) + m)
                a1 += d / s0
                a2 += d / (s0 * s0)
            for j in range(k, g_end):
                grad[j] = event[j] - ex[j] * a1
                wj = ex[j] * a1 - ex[j] * ex[j] * a2
                w[j] = wj if wj > 0.0 else 0.0
            k = g_end
    return ll


@njit(cache=True)
def loglik(eta, bounds, event, tie_end):
    n = eta.shape[0]
    return eta_derivatives(eta, bounds, event, tie_end, np.empty(n), np.empty(n))


@njit(cache=True)
def _penalized_objective(ll, beta, thr):
    pen = 0.0
    for g in range(beta.shape[0]):
        pen += thr[g] * abs(beta[g])
    return ll - pen


@njit(cache=True)
def beta_derivatives(X, eta, bounds, event, tie_end, g, H):
    """Log partial likelihood with its gradient ``g`` and information ``H``
    (negative Hessian) in coefficient space, Breslow ties.

    One backward pass per stratum accumulates the risk-set sums S0, S1, S2.
    """
    n, p = X.shape
    s1 = np.empty(p)
    s2 = np.empty((p, p))
    for a in range(p):
        g[a] = 0.0
        for c in range(p):
            H[a, c] = 0.0
    ll = 0.0
    for b in range(bounds.shape[0] - 1):
        lo = bounds[b]
        hi = bounds[b + 1]
        if hi <= lo:
            continue
        m = eta[lo]
        for k in range(lo, hi):
            if eta[k] > m:
                m = eta[k]
        s0 = 0.0
        for a in range(p):
            s1[a] = 0.0
            for c in range(p):
                s2[a, c] = 0.0
        for k in range(hi - 1, lo - 1, -1):
            e = np.exp(eta[k] - m)
            s0 += e
            for a in range(p):
                xa = e * X[k, a]
                s1[a] += xa
                for c in range(a, p):
                    s2[a, c] += xa * X[k, c]
            if k > lo and tie_end[k - 1] != k:
                continue
            # k starts a tie group: the accumulated sums cover its risk set
            d = 0.0
            for j in range(k, tie_end[k]):
                if event[j] == 1:
                    d += 1.0
                    ll += eta[j]
                    for a in range(p):
                        g[a] += X[j, a]
            if d == 0.0:
                continue
            ll -= d * (np.log(s0) + m)
            for a in range(p):
                ma = s1[a] / s0
                g[a] -= d * ma
                for c in range(a, p):
                    H[a, c] += d * (s2[a, c] / s0 - ma * s1[c] / s0)
    for a in range(p):
        for c in range(a + 1, p):
            H[c, a] = H[a, c]
    return ll


@njit(cache=True)
def _linear_predictor(X, beta, eta):
    n, p = X.shape
    for i in range(n):
        acc = 0.0
        for g in range(p):
            acc += X[i, g] * beta[g]
        eta[i] = acc


@njit(cache=True)
def cd_path(X, bounds, event, tie_end, lambdas, penalty_factor, n_scale, beta_init,
            tol, inner_tol, max_outer, max_inner):
    """Solve max l(beta) - n_scale * lam * sum_g pf_g |beta_g| along ``lambdas``.

    Each outer iteration builds the exact second-order model of l around the
    current fit and minimizes the penalized model by cyclic soft-threshold
    coordinate updates (a proximal Newton step), followed by step halving on
    the exact penalized objective.  Solutions are warm-started down the path.
    Returns (betas, status, outer iteration counts).
    """
    n, p = X.shape
    M = lambdas.shape[0]
    betas = np.zeros((M, p))
    status = np.zeros(M, dtype=np.int64)
    n_outer = np.zeros(M, dtype=np.int64)
    beta = beta_init.copy()
    eta = np.empty(n)
    grad = np.empty(p)
    H = np.empty((p, p))
    r = np.empty(p)
    thr = np.empty(p)
    old = np.empty(p)

    for li in range(M):
        for g in range(p):
            thr[g] = n_scale * lambdas[li] * penalty_factor[g]
        _linear_predictor(X, beta, eta)
        ll = beta_derivatives(X, eta, bounds, event, tie_end, grad, H)
        obj = _penalized_objective(ll, beta, thr)
        outer = 0
        while True:
            outer += 1
            for g in range(p):
                old[g] = beta[g]
                r[g] = grad[g]
            sweeps = 0
            while True:
                sweeps += 1
                delta_max = 0.0
                for g in range(p):
                    v = H[g, g]
                    if v <= 0.0:
                        continue
                    u = r[g] + v * beta[g]
                    # relative slack keeps lam == lam_max exactly at zero
                    if u > thr[g] * (1.0 + 1e-12):
                        b_new = (u - thr[g]) / v
                    elif u < -thr[g] * (1.0 + 1e-12):
                        b_new = (u + thr[g]) / v
                    else:
                        b_new = 0.0
                    delta = b_new - beta[g]
                    if delta != 0.0:
                        for c in range(p):
                            r[c] -= H[c, g] * delta
                        beta[g] = b_new
                        if abs(delta) > delta_max:
                            delta_max = abs(delta)
                if delta_max < inner_tol:
                    break
                if sweeps >= max_inner:
                    status[li] = MAX_INNER
                    break
            # step halving on the exact penalized objective
            for _ in range(60):
                _linear_predictor(X, beta, eta)
                ll = beta_derivatives(X, eta, bounds, event, tie_end, grad, H)
                obj_new = _penalized_objective(ll, beta, thr)
                if obj_new >= obj - 1e-12 * abs(obj):
                    break
                for g in range(p):
                    beta[g] = 0.5 * (beta[g] + old[g])
            obj = obj_new
            change = 0.0
            for g in range(p):
                c = abs(beta[g] - old[g])
                if c > change:
                    change = c
            if change < tol:
                break
            if outer >= max_outer:
                status[li] = MAX_OUTER
                break
        n_outer[li] = outer
        for g in range(p):
            betas[li, g] = beta[g]
    return betas, status, n_outer
