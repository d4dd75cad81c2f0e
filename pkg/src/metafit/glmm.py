"""One-stage Binomial-Normal and Poisson-Normal meta-analysis.

Raw two-arm counts are modelled directly: each study gets its own intercept
(fixed by default), the treatment arm adds the overall effect ``mu`` plus a
study-level random deviation with variance tau^2, and the marginal
likelihood integrates the deviations out with a per-study Laplace
approximation.  Conditional on the random effects the arms are independent
binomial (logit link) or Poisson (log link, person-time offset) outcomes.

The per-study integrand is log-concave, so the inner problem is solved by a
safeguarded 1-D Newton iteration; the outer optimization is quasi-Newton
with an analytic gradient obtained through the implicit-function theorem
(the mode's dependence on the outer parameters is differentiated exactly,
including the curvature term of the Laplace correction).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import expit, gammaln

from .data import ArmTable
from .errors import DataError
from .gaussian import FitResult, _numeric_hessian

LOG_2PI = math.log(2.0 * math.pi)

GRAD_TOL = 1e-6
INNER_TOL = 1e-10
INNER_MAX_ITER = 50

FAMILIES = ("binomial", "poisson")


@dataclass(frozen=True)
class OneStageModel:
    """A one-stage meta-analysis model on raw arm counts.

    ``study_intercepts`` is ``"fixed"`` (the default: one free intercept per
    study) or ``"random"`` (a shared intercept plus an iid study deviation
    with its own variance, adding one integrated dimension per study).
    """

    family: str
    data: ArmTable
    study_intercepts: str = "fixed"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DataError(f"unknown family {self.family!r}")
        if self.study_intercepts not in ("fixed", "random"):
            raise DataError("study_intercepts must be 'fixed' or 'random'")
        studies, et, st, ec, sc = self.data.paired()
        if self.family == "binomial":
            if np.any(et > st) or np.any(ec > sc):
                raise DataError("binomial events exceed arm size")
        object.__setattr__(self, "_paired", (studies, et, st, ec, sc))

    @property
    def k(self) -> int:
        return len(self._paired[0])


def _arm_loglik(family, y, size):
    """Conditional log-likelihood of one arm as a function of eta, with its
    first three derivatives.  ``size`` is n (binomial) or person-time t."""
    if family == "binomial":
        logcoef = gammaln(size + 1) - gammaln(y + 1) - gammaln(size - y + 1)

        def value(eta):
            return logcoef + y * eta - size * np.logaddexp(0.0, eta)

        def derivs(eta):
            p = expit(eta)
            w = size * p * (1.0 - p)
            return y - size * p, -w, -w * (1.0 - 2.0 * p)

    else:
        logt = math.log(size)
        const = -gammaln(y + 1)

        def value(eta):
            return const + y * (eta + logt) - math.exp(eta + logt)

        def derivs(eta):
            lam = math.exp(eta + logt)
            return y - lam, -lam, -lam

    return value, derivs


def _solve_mode_1d(derivs, s, tau2, b0=0.0):
    """Root of ``d/db [loglik(s + b) - b^2 / (2 tau2)]`` by bracketed Newton.

    The gradient is strictly decreasing in b, so the root is unique; Newton
    steps falling outside the current bracket are replaced by bisection.
    Returns (mode, curvature H = 1/tau2 - loglik'').
    """

    def grad(b):
        d1, d2, _ = derivs(s + b)
        return d1 - b / tau2, 1.0 / tau2 - d2

    b = b0
    g, h = grad(b)
    if g > 0:
        lo, step = b, 1.0
        hi = b + step
        while grad(hi)[0] > 0:
            step *= 2.0
            hi += step
            if step > 1e9:
                raise FloatingPointError("inner mode diverged")
    elif g < 0:
        hi, step = b, 1.0
        lo = b - step
        while grad(lo)[0] < 0:
            step *= 2.0
            lo -= step
            if step > 1e9:
                raise FloatingPointError("inner mode diverged")
    else:
        return b, h

    for _ in range(INNER_MAX_ITER):
        delta = g / h
        if abs(delta) < INNER_TOL * (1.0 + abs(b)):
            break
        bn = b + delta
        if not lo < bn < hi:
            bn = 0.5 * (lo + hi)
        g, h = grad(bn)
        if g > 0:
            lo = bn
        else:
            hi = bn
        b = bn
    return b, h


def _unpack_fixed(model, params):
    k = model.k
    params = np.asarray(params, dtype=float)
    if params.shape != (k + 2,):
        raise DataError(f"expected {k + 2} parameters (alpha_1..alpha_k, mu, log tau)")
    return params[:k], params[k], params[k + 1]


def joint_logdensity(model: OneStageModel, params, b) -> float:
    """Joint log-density of data and random effects at a given ``b``.

    For the default fixed-intercept model ``params`` is
    ``(alpha_1..alpha_k, mu, log tau)`` and ``b`` has one entry per study;
    the treatment arm of study i has linear predictor
    ``alpha_i + mu + b_i``.  For the random-intercept variant ``params`` is
    ``(alpha, mu, log tau, log sigma_a)`` and ``b`` is length 2k, ordered as
    (a_1, b_1, a_2, b_2, ...).
    """
    _, et, st, ec, sc = model._paired
    k = model.k
    b = np.asarray(b, dtype=float)
    if model.study_intercepts == "fixed":
        alphas, mu, ltau = _unpack_fixed(model, params)
        tau2 = math.exp(2.0 * ltau)
        total = 0.0
        for i in range(k):
            vc, _ = _arm_loglik(model.family, ec[i], sc[i])
            vt, _ = _arm_loglik(model.family, et[i], st[i])
            total += vc(alphas[i]) + vt(alphas[i] + mu + b[i])
            total += -0.5 * (LOG_2PI + 2.0 * ltau) - b[i] ** 2 / (2.0 * tau2)
        return total
    alpha, mu, ltau, lsa = np.asarray(params, dtype=float)
    tau2, sa2 = math.exp(2.0 * ltau), math.exp(2.0 * lsa)
    bb = b.reshape(k, 2)
    total = 0.0
    for i in range(k):
        a_i, b_i = bb[i]
        vc, _ = _arm_loglik(model.family, ec[i], sc[i])
        vt, _ = _arm_loglik(model.family, et[i], st[i])
        total += vc(alpha + a_i) + vt(alpha + mu + a_i + b_i)
        total += -0.5 * (LOG_2PI + 2.0 * lsa) - a_i**2 / (2.0 * sa2)
        total += -0.5 * (LOG_2PI + 2.0 * ltau) - b_i**2 / (2.0 * tau2)
    return total


def _laplace_study(value, derivs, s, tau2, b0=0.0):
    """Laplace approximation of ``log int exp(value(s+b)) phi(b; 0, tau2) db``
    for one study: joint at the inner mode plus the curvature correction.

    Returns (contribution, mode, H, d1, d3) with the likelihood derivatives
    evaluated at the mode, as needed by the outer gradient.
    """
    b, h = _solve_mode_1d(derivs, s, tau2, b0)
    eta = s + b
    joint = value(eta) - 0.5 * (LOG_2PI + math.log(tau2)) - b * b / (2.0 * tau2)
    contribution = joint + 0.5 * LOG_2PI - 0.5 * math.log(h)
    d1, _, d3 = derivs(eta)
    return contribution, b, h, d1, d3


def _laplace_parts(model, params, warm=None):
    """Per-study Laplace pieces for the fixed-intercept model.

    Returns (nll, modes, study terms) where each study term carries the
    quantities the analytic gradient needs.
    """
    _, et, st, ec, sc = model._paired
    k = model.k
    alphas, mu, ltau = _unpack_fixed(model, params)
    tau2 = math.exp(2.0 * ltau)
    modes = np.zeros(k) if warm is None else np.asarray(warm, dtype=float).copy()
    total = 0.0
    terms = []
    for i in range(k):
        vc, dc = _arm_loglik(model.family, ec[i], sc[i])
        vt, dt = _arm_loglik(model.family, et[i], st[i])
        contrib, b, h, d1, d3 = _laplace_study(vt, dt, alphas[i] + mu, tau2, modes[i])
        modes[i] = b
        total += vc(alphas[i]) + contrib
        d1c, _, _ = dc(alphas[i])
        terms.append((b, h, d1, d3, d1c))
    return -total, modes, terms


def laplace_nll(model: OneStageModel, params, warm=None) -> float:
    """Negative Laplace-approximated marginal log-likelihood.

    Each study contributes ``joint(b_hat) + log(2 pi)/2 - log(H)/2`` with
    ``H`` the curvature of the negative joint at the inner mode.  For the
    random-intercept variant the inner problem is two-dimensional.
    """
    if model.study_intercepts == "fixed":
        value, _, _ = _laplace_parts(model, params, warm)
        return value
    return _laplace_nll_random(model, params)


def laplace_nll_grad(model: OneStageModel, params, warm=None) -> np.ndarray:
    """Analytic gradient of :func:`laplace_nll` (fixed-intercept model)."""
    if model.study_intercepts != "fixed":
        raise DataError("analytic gradient is only provided for fixed intercepts")
    k = model.k
    _, _, ltau = _unpack_fixed(model, params)
    tau2 = math.exp(2.0 * ltau)
    _, _, terms = _laplace_parts(model, params, warm)
    grad = np.zeros(k + 2)
    for i, (b, h, d1, d3, d1c) in enumerate(terms):
        dL_ds = d1 + d3 / (2.0 * tau2 * h * h)
        dL_dr = b * b / tau2 - 1.0 + 1.0 / (tau2 * h) + d3 * b / (tau2 * h * h)
        grad[i] = -(d1c + dL_ds)
        grad[k] -= dL_ds
        grad[k + 1] -= dL_dr
    return grad


# ----------------------------------------------------------------------
# random-intercept variant: 2-D inner Newton
# ----------------------------------------------------------------------


def _solve_mode_2d(dc, dt, alpha, mu, sa2, tau2):
    x = np.zeros(2)  # (a, b)
    for _ in range(INNER_MAX_ITER):
        d1c, d2c, _ = dc(alpha + x[0])
        d1t, d2t, _ = dt(alpha + mu + x[0] + x[1])
        g = np.array([d1c + d1t - x[0] / sa2, d1t - x[1] / tau2])
        H = np.array(
            [
                [1.0 / sa2 - d2c - d2t, -d2t],
                [-d2t, 1.0 / tau2 - d2t],
            ]
        )
        step = np.linalg.solve(H, g)
        # damp long steps; the joint is strictly log-concave
        norm = float(np.max(np.abs(step)))
        if norm > 5.0:
            step *= 5.0 / norm
        x = x + step
        if norm < INNER_TOL * (1.0 + float(np.max(np.abs(x)))):
            break
    d1c, d2c, _ = dc(alpha + x[0])
    d1t, d2t, _ = dt(alpha + mu + x[0] + x[1])
    H = np.array(
        [[1.0 / sa2 - d2c - d2t, -d2t], [-d2t, 1.0 / tau2 - d2t]]
    )
    return x, H


def _laplace_nll_random(model, params):
    _, et, st, ec, sc = model._paired
    alpha, mu, ltau, lsa = np.asarray(params, dtype=float)
    tau2, sa2 = math.exp(2.0 * ltau), math.exp(2.0 * lsa)
    total = 0.0
    for i in range(model.k):
        vc, dc = _arm_loglik(model.family, ec[i], sc[i])
        vt, dt = _arm_loglik(model.family, et[i], st[i])
        x, H = _solve_mode_2d(dc, dt, alpha, mu, sa2, tau2)
        a_i, b_i = x
        joint = (
            vc(alpha + a_i)
            + vt(alpha + mu + a_i + b_i)
            - 0.5 * (LOG_2PI + 2.0 * lsa)
            - a_i**2 / (2.0 * sa2)
            - 0.5 * (LOG_2PI + 2.0 * ltau)
            - b_i**2 / (2.0 * tau2)
        )
        sign, logdet = np.linalg.slogdet(H)
        if sign <= 0:
            return np.inf
        total += joint + LOG_2PI - 0.5 * logdet
    return -total


# ----------------------------------------------------------------------
# fitting
# ----------------------------------------------------------------------


def _crude_effects(model):
    """Per-study continuity-corrected crude effects, for starting values."""
    _, et, st, ec, sc = model._paired
    if model.family == "binomial":
        a_t = np.log((et + 0.5) / (st - et + 0.5))
        a_c = np.log((ec + 0.5) / (sc - ec + 0.5))
    else:
        a_t = np.log((et + 0.5) / st)
        a_c = np.log((ec + 0.5) / sc)
    return a_c, a_t - a_c


def _check_separation(model):
    _, et, st, ec, sc = model._paired
    degenerate = []
    if np.all(et == 0):
        degenerate.append("all treatment arms have zero events")
    if np.all(ec == 0):
        degenerate.append("all control arms have zero events")
    if model.family == "binomial":
        if np.all(et == st):
            degenerate.append("all treatment arms have only events")
        if np.all(ec == sc):
            degenerate.append("all control arms have only events")
    if degenerate:
        raise DataError(
            "separation: "
            + "; ".join(degenerate)
            + ". Consider a continuity correction or the Gaussian route."
        )


def _drop_double_zero(model):
    """Double-zero (or double-full, binomial) studies carry no information
    about mu under fixed study intercepts; drop them up front."""
    studies, et, st, ec, sc = model._paired
    empty = (et == 0) & (ec == 0)
    if model.family == "binomial":
        empty |= (et == st) & (ec == sc)
    if not np.any(empty):
        return model, ()
    keep = [s for s, e in zip(studies, empty) if not e]
    dropped = tuple(s for s, e in zip(studies, empty) if e)
    if len(keep) < 2:
        raise DataError("fewer than 2 informative studies after dropping "
                        "double-zero studies")
    rows = [i for i, s in enumerate(model.data.study_id) if s in set(keep)]
    sub = ArmTable(
        [model.data.study_id[i] for i in rows],
        [model.data.arm[i] for i in rows],
        model.data.events[rows],
        model.data.size_or_time[rows],
    )
    return OneStageModel(model.family, sub, model.study_intercepts), dropped


def fit_onestage(model: OneStageModel) -> FitResult:
    """Maximum-likelihood fit of the one-stage model (ML only; REML is not
    defined for this likelihood).

    Standard errors come from the inverse observed information of the
    Laplace objective at the optimum.

    Raises
    ------
    DataError
        Fewer than 2 studies, or complete separation (every study
        degenerate in the same direction).
    """
    if model.k < 2:
        raise DataError("one-stage fit needs at least 2 studies")
    model, dropped = _drop_double_zero(model)
    _check_separation(model)
    k = model.k
    studies = model._paired[0]

    alpha0, crude = _crude_effects(model)
    mu0 = float(np.mean(crude))
    tau0 = min(max(float(np.std(crude, ddof=1)) / 2.0, 0.05), 2.0) if k > 1 else 0.3

    if model.study_intercepts == "fixed":
        x0 = np.concatenate([alpha0, [mu0, math.log(tau0)]])
        names = tuple(f"alpha[{s}]" for s in studies) + ("mu", "theta:study[0]")
        warm = {"modes": np.zeros(k)}

        def objective(x):
            try:
                f, modes, _ = _laplace_parts(model, x, warm["modes"])
            except (FloatingPointError, OverflowError, ValueError):
                return np.inf, np.zeros(len(x))
            warm["modes"] = modes
            return f, laplace_nll_grad(model, x, warm["modes"])

        def grad_only(x):
            return laplace_nll_grad(model, x, warm["modes"])

        jac = True
        gtol_ok = GRAD_TOL
    else:
        x0 = np.array([float(np.mean(alpha0)), mu0, math.log(tau0), math.log(0.5)])
        names = ("(Intercept)", "mu", "theta:study[0]", "theta:study.intercept[0]")

        def objective(x):
            try:
                return _laplace_nll_random(model, x)
            except (FloatingPointError, OverflowError, ValueError,
                    np.linalg.LinAlgError):
                return np.inf

        grad_only = None
        jac = None
        gtol_ok = 1e-4  # finite-difference outer gradient

    rng = np.random.default_rng(20251031)
    best = None
    total_iter = 0
    for attempt in range(4):
        xs = x0 if attempt == 0 else x0 + rng.normal(scale=0.3, size=x0.shape)
        res = optimize.minimize(
            objective,
            xs,
            jac=jac,
            method="BFGS",
            options={"gtol": GRAD_TOL, "maxiter": 500},
        )
        total_iter += res.nit
        gnorm = float(np.max(np.abs(res.jac), initial=0.0))
        ok = gnorm < gtol_ok
        if best is None or (ok and not best[1]) or (
            ok == best[1] and res.fun < best[0].fun - 1e-12
        ):
            best = (res, ok)
        if ok:
            break
    res, converged = best
    xhat = res.x

    if grad_only is not None:
        H = _numeric_hessian(grad_only, xhat)
    else:
        H = _numeric_hessian(
            lambda x: optimize.approx_fprime(x, objective, 1e-6), xhat, h=1e-4
        )
    vcov = np.linalg.pinv(H)

    if model.study_intercepts == "fixed":
        n_beta = k + 1
        theta = {"study": xhat[k + 1 : k + 2].copy()}
        ltau = xhat[k + 1]
    else:
        n_beta = 2
        theta = {
            "study": xhat[2:3].copy(),
            "study.intercept": xhat[3:4].copy(),
        }
        ltau = xhat[2]
    boundary = tuple(
        name for name, arr in theta.items() if arr[0] < -10.0
    )

    notes = ()
    if dropped:
        notes = (f"dropped uninformative studies: {', '.join(dropped)}",)

    return FitResult(
        beta=xhat[:n_beta].copy(),
        beta_cov=vcov[:n_beta, :n_beta],
        theta=theta,
        delta=np.zeros(0),
        loglik=-float(res.fun),
        converged=bool(converged),
        n_iter=int(total_iter),
        boundary_flags=boundary,
        model=model,
        params=xhat.copy(),
        param_names=names,
        vcov_params=vcov,
        y=model.data.events.copy(),
        message=str(res.message),
        notes=notes,
    )
