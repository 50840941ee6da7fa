"""Compiled scalar kernels: normal tail functions, the two log-likelihoods,
a Nelder-Mead simplex and a central-difference Hessian.

Everything here works on plain float64 arrays so it can be jitted with
numba; argument validation lives in the public modules.
"""

import math

import numpy as np
from numba import njit

SQRT2 = math.sqrt(2.0)
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

TAU2_FLOOR = 1e-10
RHO_MAX = 0.9999

# objective modes
MODE_RE = 0
MODE_COPAS = 1
MODE_COPAS_GAMMA = 2

# below this the upper-tail ratio is taken from its continued fraction
_CF_SWITCH = 5.0


@njit(cache=True)
def mills_upper(x):
    """Upper-tail Mills ratio (1 - Phi(x)) / phi(x) for x >= 5 by Lentz's
    evaluation of x + 1/(x + 2/(x + 3/(x + ...)))."""
    tiny = 1e-300
    f = x
    c = x
    d = 0.0
    for k in range(1, 500):
        d = x + k * d
        if d == 0.0:
            d = tiny
        c = x + k / c
        if c == 0.0:
            c = tiny
        d = 1.0 / d
        delta = c * d
        f *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return 1.0 / f


@njit(cache=True)
def norm_cdf(z):
    return 0.5 * math.erfc(-z / SQRT2)


@njit(cache=True)
def log_ndtr(z):
    if z >= 0.0:
        return math.log1p(-0.5 * math.erfc(z / SQRT2))
    if z > -_CF_SWITCH:
        return math.log(0.5 * math.erfc(-z / SQRT2))
    x = -z
    return -0.5 * x * x - LOG_SQRT_2PI + math.log(mills_upper(x))


@njit(cache=True)
def inv_mills(z):
    if z >= -_CF_SWITCH:
        return INV_SQRT_2PI * math.exp(-0.5 * z * z) / norm_cdf(z)
    return 1.0 / mills_upper(-z)


@njit(cache=True)
def shrink_c(z):
    lam = inv_mills(z)
    return lam * (z + lam)


@njit(cache=True)
def re_loglik(theta, tau2, d, s):
    total = 0.0
    for i in range(d.shape[0]):
        v = tau2 + s[i] * s[i]
        r = d[i] - theta
        total += -0.5 * math.log(v) - r * r / (2.0 * v)
    return total


@njit(cache=True)
def copas_loglik(theta, tau2, rho, gamma, d, s, u, log_phi_u, c):
    """Conditional log-likelihood given the per-study selection index
    u = alpha + beta / s, log Phi(u) and the shrinkage factor c(u)."""
    total = 0.0
    r2 = rho * rho
    for i in range(d.shape[0]):
        sig2 = s[i] * s[i] / (1.0 - c[i] * c[i] * r2)
        v = tau2 + sig2
        sv = math.sqrt(v)
        resid = d[i] - theta - gamma / s[i]
        rt = math.sqrt(sig2) * rho / sv
        vi = (u[i] + rt * resid / sv) / math.sqrt(1.0 - rt * rt)
        total += -0.5 * math.log(v) - resid * resid / (2.0 * v) - log_phi_u[i] + log_ndtr(vi)
    return total


@njit(cache=True)
def unpack(x, mode):
    """Map optimizer coordinates to (theta, tau2, rho, gamma)."""
    theta = x[0]
    tau2 = math.exp(x[1]) - TAU2_FLOOR
    if tau2 < 0.0:
        tau2 = 0.0
    rho = 0.0
    gamma = 0.0
    if mode != MODE_RE:
        rho = RHO_MAX * math.tanh(x[2])
    if mode == MODE_COPAS_GAMMA:
        gamma = x[3]
    return theta, tau2, rho, gamma


@njit(cache=True)
def objective(x, mode, d, s, u, log_phi_u, c):
    theta, tau2, rho, gamma = unpack(x, mode)
    if mode == MODE_RE:
        val = -re_loglik(theta, tau2, d, s)
    else:
        val = -copas_loglik(theta, tau2, rho, gamma, d, s, u, log_phi_u, c)
    if not math.isfinite(val):
        return math.inf
    return val


@njit(cache=True)
def _sort_simplex(sim, fs):
    order = np.argsort(fs)
    return sim[order].copy(), fs[order].copy()


@njit(cache=True)
def nelder_mead(x0, step, mode, d, s, u, log_phi_u, c, ftol, xtol, maxiter):
    """Minimise ``objective`` from ``x0``.

    Stops when the spread of simplex values is below ``ftol * (1 + |f_best|)``
    and every vertex lies within ``xtol`` of the best one.
    Returns (x_best, f_best, iterations, converged, n_evaluations).
    """
    n = x0.shape[0]
    sim = np.empty((n + 1, n))
    fs = np.empty(n + 1)
    for k in range(n + 1):
        sim[k, :] = x0
        if k > 0:
            sim[k, k - 1] += step[k - 1]
        fs[k] = objective(sim[k], mode, d, s, u, log_phi_u, c)
    nfev = n + 1
    converged = False
    it = 0
    while it < maxiter:
        sim, fs = _sort_simplex(sim, fs)
        fspread = 0.0
        xspread = 0.0
        for k in range(1, n + 1):
            df = abs(fs[k] - fs[0])
            if df > fspread:
                fspread = df
            for j in range(n):
                dx = abs(sim[k, j] - sim[0, j])
                if dx > xspread:
                    xspread = dx
        if fspread <= ftol * (1.0 + abs(fs[0])) and xspread <= xtol:
            converged = True
            break
        it += 1
        centroid = np.zeros(n)
        for k in range(n):
            centroid += sim[k]
        centroid /= n
        worst = sim[n]
        xr = 2.0 * centroid - worst
        fr = objective(xr, mode, d, s, u, log_phi_u, c)
        nfev += 1
        if fr < fs[0]:
            xe = 3.0 * centroid - 2.0 * worst
            fe = objective(xe, mode, d, s, u, log_phi_u, c)
            nfev += 1
            if fe < fr:
                sim[n] = xe
                fs[n] = fe
            else:
                sim[n] = xr
                fs[n] = fr
            continue
        if fr < fs[n - 1]:
            sim[n] = xr
            fs[n] = fr
            continue
        if fr < fs[n]:
            xc = centroid + 0.5 * (xr - centroid)
            fc = objective(xc, mode, d, s, u, log_phi_u, c)
            nfev += 1
            if fc <= fr:
                sim[n] = xc
                fs[n] = fc
                continue
        else:
            xc = centroid + 0.5 * (worst - centroid)
            fc = objective(xc, mode, d, s, u, log_phi_u, c)
            nfev += 1
            if fc < fs[n]:
                sim[n] = xc
                fs[n] = fc
                continue
        for k in range(1, n + 1):
            sim[k] = sim[0] + 0.5 * (sim[k] - sim[0])
            fs[k] = objective(sim[k], mode, d, s, u, log_phi_u, c)
        nfev += n
    sim, fs = _sort_simplex(sim, fs)
    return sim[0].copy(), fs[0], it, converged, nfev


@njit(cache=True)
def minimize_with_restarts(x0, step, mode, d, s, u, log_phi_u, c, ftol, xtol, maxiter, restarts):
    """Simplex search followed by up to ``restarts`` relaunches from the
    incumbent shifted by +-20 %; stops relaunching once one fails to improve."""
    x, f, it, conv, nfev = nelder_mead(x0, step, mode, d, s, u, log_phi_u, c, ftol, xtol, maxiter)
    total_it = it
    n = x.shape[0]
    for r in range(restarts):
        start = x.copy()
        for j in range(n):
            sign = 1.0 if ((j + r) % 2 == 0) else -1.0
            if abs(start[j]) > 1e-3:
                start[j] = start[j] * (1.0 + 0.2 * sign)
            else:
                start[j] = start[j] + 0.2 * sign * step[j]
        x2, f2, it2, conv2, nfev2 = nelder_mead(start, step, mode, d, s, u, log_phi_u, c, ftol, xtol, maxiter)
        total_it += it2
        nfev += nfev2
        if f2 < f - ftol * (1.0 + abs(f)):
            x, f, conv = x2, f2, conv2
        else:
            if f2 < f:
                x, f = x2, f2
            conv = conv or conv2
            break
    return x, f, total_it, conv, nfev


@njit(cache=True)
def _natural_loglik(p, mode, d, s, u, log_phi_u, c):
    if mode == MODE_RE:
        return re_loglik(p[0], p[1], d, s)
    gamma = 0.0
    if mode == MODE_COPAS_GAMMA:
        gamma = p[3]
    return copas_loglik(p[0], p[1], p[2], gamma, d, s, u, log_phi_u, c)


@njit(cache=True)
def loglik_hessian(p, h, mode, d, s, u, log_phi_u, c):
    """Central-difference Hessian of the log-likelihood in natural
    parameters (theta, tau2[, rho[, gamma]])."""
    n = p.shape[0]
    hess = np.empty((n, n))
    f0 = _natural_loglik(p, mode, d, s, u, log_phi_u, c)
    q = p.copy()
    for j in range(n):
        q[j] = p[j] + h[j]
        fp = _natural_loglik(q, mode, d, s, u, log_phi_u, c)
        q[j] = p[j] - h[j]
        fm = _natural_loglik(q, mode, d, s, u, log_phi_u, c)
        q[j] = p[j]
        hess[j, j] = (fp - 2.0 * f0 + fm) / (h[j] * h[j])
        for k in range(j):
            q[j] = p[j] + h[j]
            q[k] = p[k] + h[k]
            fpp = _natural_loglik(q, mode, d, s, u, log_phi_u, c)
            q[k] = p[k] - h[k]
            fpm = _natural_loglik(q, mode, d, s, u, log_phi_u, c)
            q[j] = p[j] - h[j]
            fmm = _natural_loglik(q, mode, d, s, u, log_phi_u, c)
            q[k] = p[k] + h[k]
            fmp = _natural_loglik(q, mode, d, s, u, log_phi_u, c)
            q[j] = p[j]
            q[k] = p[k]
            val = (fpp - fpm - fmp + fmm) / (4.0 * h[j] * h[k])
            hess[j, k] = val
            hess[k, j] = val
    return hess


@njit(cache=True)
def selection_terms(alpha, beta, s):
    """Per-study u = alpha + beta/s, log Phi(u) and c(u)."""
    m = s.shape[0]
    u = np.empty(m)
    lpu = np.empty(m)
    c = np.empty(m)
    for i in range(m):
        ui = alpha + beta / s[i]
        u[i] = ui
        lpu[i] = log_ndtr(ui)
        c[i] = shrink_c(ui)
    return u, lpu, c
