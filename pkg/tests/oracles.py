"""Independent reference implementations used only by the tests.

Each oracle recomputes its target quantity from first principles (closed
forms, grid search, quadrature, brute-force optimization) without touching
the engine code paths it is checking.
"""

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy import optimize, stats
from scipy.special import logsumexp

LOG_2PI = np.log(2.0 * np.pi)


def balanced_reml(y, v):
    """Closed-form REML for the balanced random-effects model (equal v):
    mu = mean(y), tau2 = max(0, sample variance - v)."""
    y = np.asarray(y, dtype=float)
    return float(np.mean(y)), max(0.0, float(np.var(y, ddof=1)) - float(v))


def reml_criterion_profile(y, v, tau2):
    """Intercept-only random-effects REML criterion at given tau2 values,
    written directly from the weighted-least-squares identities."""
    y = np.asarray(y, dtype=float)[:, None]
    v = np.asarray(v, dtype=float)[:, None]
    tau2 = np.atleast_1d(np.asarray(tau2, dtype=float))[None, :]
    w = 1.0 / (v + tau2)
    sw = np.sum(w, axis=0)
    mu = np.sum(w * y, axis=0) / sw
    quad = np.sum(w * (y - mu) ** 2, axis=0)
    n = y.shape[0]
    return 0.5 * (
        (n - 1) * LOG_2PI + np.sum(np.log(v + tau2), axis=0) + np.log(sw) + quad
    )


def grid_search_reml(y, v, step=1e-4, upper=None):
    """Grid minimizer of the profiled REML criterion over tau2.

    Returns (mu_at_min, tau2_at_min).
    """
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    if upper is None:
        upper = 3.0 * float(np.var(y, ddof=1)) + float(np.max(v)) + 10 * step
    grid = np.arange(0.0, upper + step, step)
    crit = reml_criterion_profile(y, v, grid)
    tau2 = float(grid[int(np.argmin(crit))])
    w = 1.0 / (v + tau2)
    mu = float(np.sum(w * y) / np.sum(w))
    return mu, tau2


def gls_fixed_effect(y, v):
    """Inverse-variance weighted mean and its standard error."""
    w = 1.0 / np.asarray(v, dtype=float)
    mu = float(np.sum(w * y) / np.sum(w))
    return mu, float(np.sum(w) ** -0.5)


# ----------------------------------------------------------------------
# adaptive Gauss-Hermite oracle for the one-stage models
# ----------------------------------------------------------------------


def _arm_logpmf(family, y, size, eta):
    if family == "binomial":
        p = 1.0 / (1.0 + np.exp(-eta))
        return stats.binom.logpmf(y, size, p)
    return stats.poisson.logpmf(y, size * np.exp(eta))


def gh_nll(model, params, order=20):
    """Negative marginal log-likelihood via adaptive Gauss-Hermite
    quadrature, recentered at the per-study mode with scale H^(-1/2).

    The mode is found with a generic bounded scalar optimizer and the
    curvature by central differences, independently of the engine's Newton
    solver.
    """
    studies, et, st, ec, sc = model.data.paired()
    k = len(studies)
    params = np.asarray(params, dtype=float)
    alphas, mu, ltau = params[:k], params[k], params[k + 1]
    tau2 = np.exp(2.0 * ltau)
    nodes, weights = hermgauss(order)
    total = 0.0
    for i in range(k):
        def joint(b):
            eta = alphas[i] + mu + b
            prior = -0.5 * (LOG_2PI + np.log(tau2)) - b * b / (2.0 * tau2)
            return _arm_logpmf(model.family, et[i], st[i], eta) + prior

        res = optimize.minimize_scalar(
            lambda b: -joint(b),
            bounds=(-40.0, 40.0),
            method="bounded",
            options={"xatol": 1e-12},
        )
        bhat = float(res.x)
        h = 1e-4
        curv = -(joint(bhat + h) - 2.0 * joint(bhat) + joint(bhat - h)) / h**2
        scale = 1.0 / np.sqrt(curv)
        z = bhat + np.sqrt(2.0) * scale * nodes
        logint = (
            0.5 * np.log(2.0)
            + np.log(scale)
            + logsumexp(np.log(weights) + nodes**2 + np.array([joint(b) for b in z]))
        )
        total += _arm_logpmf(model.family, ec[i], sc[i], alphas[i]) + logint
    return -total


def fit_gh(model, x0, order=20):
    """Maximum-likelihood fit under the Gauss-Hermite objective."""
    res = optimize.minimize(
        lambda x: gh_nll(model, x, order=order),
        np.asarray(x0, dtype=float),
        method="BFGS",
        options={"gtol": 1e-6, "maxiter": 500},
    )
    return res.x, float(res.fun)


def glm_fixed_effects_nll(model, params):
    """No-random-effect GLM negative log-likelihood at (alphas, mu):
    the tau2 -> 0 limit of the marginal model."""
    studies, et, st, ec, sc = model.data.paired()
    k = len(studies)
    alphas, mu = params[:k], params[k]
    total = 0.0
    for i in range(k):
        total += _arm_logpmf(model.family, ec[i], sc[i], alphas[i])
        total += _arm_logpmf(model.family, et[i], st[i], alphas[i] + mu)
    return -float(total)
