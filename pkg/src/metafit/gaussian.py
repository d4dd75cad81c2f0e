"""ML/REML estimation of the Gaussian marginal model.

The marginal covariance is assembled as

    Sigma(theta, delta) = V_fixed + sum_r Z_r (I_K (x) G_r(theta_r)) Z_r'
                          + diag(exp(2 X_disp delta))

where ``V_fixed`` is the known sampling-error covariance contributed by an
``equalto`` term and the last piece is the dispersion model on the log-SD
scale (absent entirely under the zero dispersion formula).  Fixed effects
are profiled out by GLS, so the optimizer only sees the variance
parameters; the REML criterion is

    0.5 [ (n - p) log 2 pi + log|Sigma| + log|X' Sigma^-1 X| + r' Sigma^-1 r ]

with ``r`` the GLS residual (the ML criterion drops the middle projection
term and uses ``n`` in the constant).  One Cholesky factorization per
evaluation; no explicit inverse on the likelihood path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy import optimize
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.stats import chi2

from .covstruct import (
    BOUNDARY_LOG_SD,
    component_variances,
    d_materialize,
    initial_theta,
    materialize,
)
from .data import EffectSizeTable
from .errors import DataError, FitError
from .formula import DesignBundle, build_design, parse_dispformula, parse_formula

LOG_2PI = math.log(2.0 * math.pi)

GRAD_TOL = 1e-6
MAX_ITER = 500
N_RESTARTS = 3


@dataclass(frozen=True)
class GaussianModel:
    """A Gaussian marginal model ready for fitting.

    ``zero_disp_jitter`` adds a constant diagonal to Sigma when the
    dispersion formula is the zero formula; the default of exactly zero
    relies on ``V_fixed`` (or the random terms) keeping Sigma positive
    definite.
    """

    design: DesignBundle
    reml: bool = True
    zero_disp_jitter: float = 0.0

    def __post_init__(self):
        free = tuple(t for t in self.design.terms if t.structure.n_params > 0)
        names = []
        for t in free:
            names += [f"theta:{t.name}[{i}]" for i in range(t.structure.n_params)]
        if self.design.X_disp is not None:
            names += [f"disp:{c}" for c in self.design.disp_names]
        object.__setattr__(self, "_free_terms", free)
        object.__setattr__(self, "param_names", tuple(names))
        zzt = {t.name: t.Z @ t.Z.T for t in free if t.structure.kind == "iid"}
        object.__setattr__(self, "_zzt", zzt)

    @property
    def n_free_params(self) -> int:
        return len(self.param_names)

    @property
    def n_delta(self) -> int:
        xd = self.design.X_disp
        return 0 if xd is None else xd.shape[1]

    def split(self, params):
        """Packed vector -> (list of per-term theta, delta)."""
        params = np.asarray(params, dtype=float)
        if params.shape != (self.n_free_params,):
            raise DataError(
                f"expected {self.n_free_params} packed parameters, got {params.shape}"
            )
        thetas, pos = [], 0
        for t in self._free_terms:
            k = t.structure.n_params
            thetas.append(params[pos : pos + k])
            pos += k
        return thetas, params[pos:]


class ProfileCI(NamedTuple):
    lo: float
    hi: float
    wald_fallback: bool = False


@dataclass
class FitResult:
    """Converged (or not) parameter estimates and diagnostics."""

    beta: np.ndarray
    beta_cov: np.ndarray
    theta: dict
    delta: np.ndarray
    loglik: float
    converged: bool
    n_iter: int
    boundary_flags: tuple
    model: object
    params: np.ndarray
    param_names: tuple
    vcov_params: np.ndarray
    y: np.ndarray
    message: str = ""
    notes: tuple = field(default_factory=tuple)

    @property
    def n_obs(self) -> int:
        return len(self.y)


def _sigma(model: GaussianModel, thetas, delta):
    d = model.design
    n = d.n
    if d.V_fixed is not None:
        S = d.V_fixed.copy()
    else:
        S = np.zeros((n, n))
    for t, th in zip(model._free_terms, thetas):
        if t.structure.kind == "iid":
            S += math.exp(2.0 * th[0]) * model._zzt[t.name]
        else:
            G = materialize(t.structure, th)
            K = len(t.group_levels)
            S += t.Z @ np.kron(np.eye(K), G) @ t.Z.T
    if d.X_disp is not None:
        sd = np.exp(d.X_disp @ delta)
        S[np.diag_indices(n)] += sd * sd
    elif model.zero_disp_jitter > 0:
        S[np.diag_indices(n)] += model.zero_disp_jitter
    return S


def _gls_parts(model, S, y):
    """Cholesky-based GLS pieces shared by the criterion and its gradient."""
    X = model.design.X
    n, p = X.shape
    c = cho_factor(S, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
    WX = cho_solve(c, X) if p else np.zeros((n, 0))
    if p:
        XtWX = X.T @ WX
        cs = cho_factor(XtWX, lower=True)
        logdet_xwx = 2.0 * np.sum(np.log(np.diag(cs[0])))
        beta = cho_solve(cs, X.T @ cho_solve(c, y))
        S_inv_fac = cs
    else:
        XtWX = np.zeros((0, 0))
        logdet_xwx = 0.0
        beta = np.zeros(0)
        S_inv_fac = None
    r = y - X @ beta
    u = cho_solve(c, r)
    quad = float(r @ u)
    return c, logdet, WX, XtWX, S_inv_fac, logdet_xwx, beta, r, u, quad


def nll(model: GaussianModel, params, y) -> float:
    """Negative profiled log-likelihood (ML) or restricted log-likelihood
    (REML) at a packed variance-parameter vector.

    Returns +inf when Sigma(params) is not positive definite, so the
    optimizer can back off safely.
    """
    y = np.asarray(y, dtype=float)
    thetas, delta = model.split(params)
    S = _sigma(model, thetas, delta)
    try:
        _, logdet, _, _, _, logdet_xwx, _, _, _, quad = _gls_parts(model, S, y)
    except (LinAlgError, ValueError, FloatingPointError):
        return np.inf
    n, p = model.design.X.shape
    if model.reml:
        return 0.5 * ((n - p) * LOG_2PI + logdet + logdet_xwx + quad)
    return 0.5 * (n * LOG_2PI + logdet + quad)


def _value_and_grad(model, params, y):
    """(nll, gradient), safe on non-PD points: (+inf, zeros)."""
    f = nll(model, params, y)
    if not np.isfinite(f):
        return np.inf, np.zeros(model.n_free_params)
    return f, nll_grad(model, params, y)


def _d_sigma_list(model, thetas, delta):
    """dSigma/dparam for every packed parameter.

    Diagonal derivatives (dispersion) are returned as 1-D arrays to avoid
    materializing n x n matrices.
    """
    out = []
    for t, th in zip(model._free_terms, thetas):
        K = len(t.group_levels)
        for dG in d_materialize(t.structure, th):
            if t.structure.kind == "iid":
                out.append(dG[0, 0] * model._zzt[t.name])
            else:
                out.append(t.Z @ np.kron(np.eye(K), dG) @ t.Z.T)
    xd = model.design.X_disp
    if xd is not None:
        var = np.exp(2.0 * (xd @ delta))
        for j in range(xd.shape[1]):
            out.append(("diag", 2.0 * var * xd[:, j]))
    return out


def nll_grad(model: GaussianModel, params, y) -> np.ndarray:
    """Analytic gradient of :func:`nll` with respect to the packed vector."""
    y = np.asarray(y, dtype=float)
    thetas, delta = model.split(params)
    S = _sigma(model, thetas, delta)
    c, _, WX, XtWX, s_fac, _, _, _, u, _ = _gls_parts(model, S, y)
    n, p = model.design.X.shape
    Winv = cho_solve(c, np.eye(n))
    if model.reml and p:
        T = cho_solve(s_fac, WX.T).T  # WX (X' W X)^-1, n x p
    grad = np.zeros(model.n_free_params)
    for k, dS in enumerate(_d_sigma_list(model, thetas, delta)):
        if isinstance(dS, tuple):
            w = dS[1]
            tr = float(np.diag(Winv) @ w)
            quad = float(w @ (u * u))
            reml_tr = float(np.einsum("ij,ij->", T * w[:, None], WX)) if (
                model.reml and p
            ) else 0.0
        else:
            tr = float(np.sum(Winv * dS))
            quad = float(u @ dS @ u)
            reml_tr = float(np.sum(T * (dS @ WX))) if (model.reml and p) else 0.0
        grad[k] = 0.5 * (tr - reml_tr - quad)
    return grad


def _boundary_flags(model, thetas, data_scale):
    flags = []
    floor = max(math.exp(BOUNDARY_LOG_SD), 1e-5 * data_scale)
    for t, th in zip(model._free_terms, thetas):
        for suffix, var in component_variances(t.structure, th, t.level_names):
            name = t.name if not suffix else f"{t.name}.{suffix}"
            if math.sqrt(max(var, 0.0)) < floor:
                flags.append(name)
    return tuple(flags)


def _numeric_hessian(fun_grad, x, h=1e-5):
    k = len(x)
    H = np.zeros((k, k))
    for i in range(k):
        hi = h * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += hi
        xm[i] -= hi
        H[:, i] = (fun_grad(xp) - fun_grad(xm)) / (2.0 * hi)
    return 0.5 * (H + H.T)


def fit(model: GaussianModel, y, start=None) -> FitResult:
    """Fit by quasi-Newton minimization of the packed variance parameters.

    Convergence requires the gradient infinity-norm below 1e-6; up to three
    jittered restarts are attempted before reporting failure.  When the
    model has no free variance parameters the fit degenerates to a single
    GLS solve.  Fixed effects and their covariance are recovered at the
    optimum as ``beta = (X' S^-1 X)^-1 X' S^-1 y``.

    Raises
    ------
    DataError
        If n <= p or Sigma is not positive definite at the initial point.
    """
    y = np.asarray(y, dtype=float)
    d = model.design
    n, p = d.X.shape
    if n != len(y):
        raise DataError("response length does not match design")
    if n <= p:
        raise DataError(f"need more observations ({n}) than fixed effects ({p})")
    data_scale = float(np.std(y, ddof=1)) if n > 1 else 1.0
    if not np.isfinite(data_scale) or data_scale <= 0:
        data_scale = 1.0

    if start is None:
        pieces = [initial_theta(t.structure, data_scale) for t in model._free_terms]
        if model.n_delta:
            delta0 = np.zeros(model.n_delta)
            delta0[0] = math.log(data_scale / 2.0)
            pieces.append(delta0)
        x0 = np.concatenate(pieces) if pieces else np.zeros(0)
    else:
        x0 = np.asarray(start, dtype=float)

    if not np.isfinite(nll(model, x0, y)):
        raise DataError("initial covariance matrix is not positive definite")

    if model.n_free_params == 0:
        value = nll(model, x0, y)
        _, _, _, XtWX, s_fac, _, beta, _, _, _ = _gls_parts(
            model, _sigma(model, [], np.zeros(0)), y
        )
        beta_cov = cho_solve(s_fac, np.eye(p)) if p else np.zeros((0, 0))
        return FitResult(
            beta=beta,
            beta_cov=beta_cov,
            theta={t.name: np.zeros(0) for t in d.terms},
            delta=np.zeros(0),
            loglik=-value,
            converged=True,
            n_iter=0,
            boundary_flags=(),
            model=model,
            params=np.zeros(0),
            param_names=(),
            vcov_params=np.zeros((0, 0)),
            y=y.copy(),
        )

    def objective(x):
        return _value_and_grad(model, x, y)

    rng = np.random.default_rng(20251031)
    best = None  # (res, converged)
    total_iter = 0
    for attempt in range(1 + N_RESTARTS):
        xs = x0 if attempt == 0 else x0 + rng.normal(scale=0.5, size=x0.shape)
        if not np.isfinite(nll(model, xs, y)):
            continue
        res = optimize.minimize(
            objective,
            xs,
            jac=True,
            method="BFGS",
            options={"gtol": GRAD_TOL, "maxiter": MAX_ITER},
        )
        total_iter += res.nit
        grad_inf = float(np.max(np.abs(nll_grad(model, res.x, y)), initial=0.0))
        ok = grad_inf < GRAD_TOL
        if best is None or (ok and not best[1]) or (
            ok == best[1] and res.fun < best[0].fun - 1e-12
        ):
            best = (res, ok)
        if ok:
            break
    res, converged = best
    message = res.message

    xhat = res.x
    thetas, delta = model.split(xhat)
    S = _sigma(model, thetas, delta)
    _, _, _, XtWX, s_fac, _, beta, _, _, _ = _gls_parts(model, S, y)
    beta_cov = cho_solve(s_fac, np.eye(p)) if p else np.zeros((0, 0))

    H = _numeric_hessian(lambda x: nll_grad(model, x, y), xhat)
    vcov_params = np.linalg.pinv(H)

    theta = {}
    it = iter(thetas)
    for t in d.terms:
        theta[t.name] = next(it).copy() if t.structure.n_params else np.zeros(0)

    return FitResult(
        beta=beta,
        beta_cov=beta_cov,
        theta=theta,
        delta=delta.copy(),
        loglik=-float(res.fun),
        converged=bool(converged),
        n_iter=int(total_iter),
        boundary_flags=_boundary_flags(model, thetas, data_scale),
        model=model,
        params=xhat.copy(),
        param_names=model.param_names,
        vcov_params=vcov_params,
        y=y.copy(),
        message=str(message),
    )


def fit_from_formula(
    table: EffectSizeTable,
    formula: str,
    dispformula: str = "~1",
    matrices: dict | None = None,
    reml: bool = True,
    zero_disp_jitter: float = 0.0,
) -> FitResult:
    """Parse, build designs, and fit in one call."""
    spec = parse_formula(formula)
    spec = replace(spec, disp_terms=parse_dispformula(dispformula), reml=reml)
    design = build_design(spec, table, matrices)
    model = GaussianModel(design, reml=reml, zero_disp_jitter=zero_disp_jitter)
    return fit(model, table.y)


# ----------------------------------------------------------------------
# profile confidence intervals
# ----------------------------------------------------------------------


def _profiled_value(model, y, fixed_idx, fixed_val, x_start):
    """Minimize the criterion over the packed parameters with one entry held
    fixed; returns the criterion value."""
    free = [i for i in range(model.n_free_params) if i != fixed_idx]
    if not free:
        x = np.array([fixed_val])
        return nll(model, x, y)

    def obj(z):
        x = np.empty(model.n_free_params)
        x[free] = z
        x[fixed_idx] = fixed_val
        f, g = _value_and_grad(model, x, y)
        return f, g[free] if np.isfinite(f) else np.zeros(len(free))

    res = optimize.minimize(
        obj, x_start[free], jac=True, method="BFGS", options={"gtol": 1e-7}
    )
    return float(res.fun)


def _beta_profile_model(model, j):
    """Design with fixed-effect column j removed (for beta profiling)."""
    from dataclasses import replace

    d = model.design
    keep = [i for i in range(d.X.shape[1]) if i != j]
    d2 = replace(
        d, X=d.X[:, keep], coef_names=tuple(d.coef_names[i] for i in keep)
    )
    return GaussianModel(d2, reml=model.reml, zero_disp_jitter=model.zero_disp_jitter)


def profile_ci(model: GaussianModel, fitres: FitResult, target: str, level=0.95):
    """Profile-likelihood confidence interval for one parameter.

    ``target`` is ``"beta:<coefficient name>"`` or a packed variance
    parameter name from ``fitres.param_names`` (``theta:...`` entries are
    profiled on the log-SD scale and the interval is returned on the SD
    scale; ``disp:...`` entries are returned on the log-SD scale).  The
    endpoints are where the profiled deviance rises by the chi-square(1)
    quantile, found by stepwise bracketing and bisection; if the search hits
    the parameter bounds the Wald interval is returned with
    ``wald_fallback=True``.

    Raises
    ------
    FitError
        If the fit did not converge.
    """
    if not fitres.converged:
        raise FitError("profile_ci requires a converged fit")
    if not 0.0 < level < 1.0:
        raise DataError("level must be in (0, 1)")
    qcrit = chi2.ppf(level, 1)
    y = fitres.y

    if target.startswith("beta:"):
        name = target[5:]
        names = list(model.design.coef_names)
        if name not in names:
            raise DataError(f"unknown coefficient {name!r}")
        j = names.index(name)
        sub = _beta_profile_model(model, j)
        xj = model.design.X[:, j]
        se = math.sqrt(fitres.beta_cov[j, j])
        center = float(fitres.beta[j])

        def prof(v):
            subfit_y = y - xj * v
            if sub.n_free_params == 0:
                return nll(sub, np.zeros(0), subfit_y)

            def obj(z):
                return _value_and_grad(sub, z, subfit_y)

            res = optimize.minimize(
                obj, fitres.params, jac=True, method="BFGS", options={"gtol": 1e-7}
            )
            return float(res.fun)

        ref = optimize.minimize_scalar(
            prof, bounds=(center - 8 * se, center + 8 * se), method="bounded"
        )
        fmin, vhat = float(ref.fun), float(ref.x)
        lo = _profile_side(prof, vhat, fmin, qcrit, -se, bound=None)
        hi = _profile_side(prof, vhat, fmin, qcrit, +se, bound=None)
        if lo is None or hi is None:
            z = abs(chi2.ppf(level, 1)) ** 0.5
            return ProfileCI(center - z * se, center + z * se, True)
        return ProfileCI(lo, hi, False)

    if target not in fitres.param_names:
        raise DataError(f"unknown parameter {target!r}")
    idx = list(fitres.param_names).index(target)
    center = float(fitres.params[idx])
    se = math.sqrt(max(fitres.vcov_params[idx, idx], 1e-12))
    fmin = -fitres.loglik

    def prof(v):
        return _profiled_value(model, y, idx, v, fitres.params)

    bound = 30.0 if target.startswith("theta:") else None
    lo = _profile_side(prof, center, fmin, qcrit, -max(se, 0.1), bound)
    hi = _profile_side(prof, center, fmin, qcrit, +max(se, 0.1), bound)
    wald = lo is None or hi is None
    if wald:
        z = chi2.ppf(level, 1) ** 0.5
        lo, hi = center - z * se, center + z * se
    if target.startswith("theta:"):
        return ProfileCI(math.exp(lo), math.exp(hi), wald)
    return ProfileCI(lo, hi, wald)


def _profile_side(prof, vhat, fmin, qcrit, step, bound):
    """Bracket then bisect the deviance crossing on one side of the optimum.

    Returns None when the search leaves ``bound`` (interpreted as hitting
    the parameter bounds).
    """
    inner = vhat
    outer = vhat + step
    for _ in range(60):
        if bound is not None and abs(outer) > bound:
            return None
        dev = 2.0 * (prof(outer) - fmin)
        if dev >= qcrit:
            break
        inner, outer = outer, outer + (outer - vhat) * 1.6
    else:
        return None
    for _ in range(80):
        mid = 0.5 * (inner + outer)
        if abs(outer - inner) < 1e-7 * (1.0 + abs(mid)):
            break
        if 2.0 * (prof(mid) - fmin) >= qcrit:
            outer = mid
        else:
            inner = mid
    return 0.5 * (inner + outer)
