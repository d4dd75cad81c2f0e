"""Summaries, tests, and derived heterogeneity statistics.

All fixed-effect tests are two-sided normal (z) tests; confidence intervals
are Wald by default (profile intervals live in the engine module).  The
reported log-likelihood follows the additive-constant convention of the
fitting criterion itself, without the extra design-dependent constant some
other software folds into its REML value; the offset is a constant, so
estimates are unaffected either way.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .covstruct import component_variances
from .errors import DataError, FitError
from .gaussian import FitResult, GaussianModel
from .glmm import OneStageModel


@dataclass(frozen=True)
class CoefRow:
    name: str
    estimate: float
    se: float
    z: float
    p: float
    wald_lo: float
    wald_hi: float


@dataclass(frozen=True)
class VarComp:
    name: str
    variance: float
    sd: float
    boundary: bool = False


@dataclass(frozen=True)
class Summary:
    """Model summary: coefficient table, variance components, fit stats."""

    coefficients: tuple
    variance_components: tuple
    scale_coefficients: tuple
    residual_sd: float | None
    loglik: float
    aic: float
    bic: float
    n: int
    k_groups: dict
    method: str
    boundary_flags: tuple


def _coef_rows(names, est, cov, zcrit):
    rows = []
    for j, name in enumerate(names):
        se = math.sqrt(max(float(cov[j, j]), 0.0))
        e = float(est[j])
        z = e / se if se > 0 else math.inf * np.sign(e) if e else 0.0
        p = float(2.0 * norm.sf(abs(z))) if np.isfinite(z) else 0.0
        rows.append(CoefRow(name, e, se, z, p, e - zcrit * se, e + zcrit * se))
    return tuple(rows)


def _gaussian_components(fit: FitResult):
    model: GaussianModel = fit.model
    comps = []
    for t in model.design.terms:
        if t.structure.n_params == 0:
            continue
        th = fit.theta[t.name]
        for suffix, var in component_variances(t.structure, th, t.level_names):
            name = t.name if not suffix else f"{t.name}.{suffix}"
            boundary = name in fit.boundary_flags
            if boundary:
                comps.append(VarComp(name, 0.0, 0.0, True))
            else:
                comps.append(VarComp(name, var, math.sqrt(var), False))
    return tuple(comps)


def summarize(fit: FitResult, level: float = 0.95) -> Summary:
    """Build a :class:`Summary` from a converged fit.

    Raises
    ------
    FitError
        When the fit did not converge (the optimizer message is included).
    """
    if not fit.converged:
        raise FitError(
            f"fit did not converge after {fit.n_iter} iterations: {fit.message}"
        )
    if not 0.0 < level < 1.0:
        raise DataError("level must be in (0, 1)")
    zcrit = float(norm.ppf(0.5 + level / 2.0))

    if isinstance(fit.model, OneStageModel):
        model = fit.model
        alpha_names = [n for n in fit.param_names if n.startswith("alpha[")]
        if model.study_intercepts == "fixed":
            names = alpha_names + ["mu"]
        else:
            names = ["(Intercept)", "mu"]
        coef = _coef_rows(names, fit.beta, fit.beta_cov, zcrit)
        comps = []
        for name, arr in fit.theta.items():
            var = math.exp(2.0 * arr[0])
            if name in fit.boundary_flags:
                comps.append(VarComp(name, 0.0, 0.0, True))
            else:
                comps.append(VarComp(name, var, math.sqrt(var), False))
        npar = len(fit.params)
        n = 2 * model.k
        return Summary(
            coefficients=coef,
            variance_components=tuple(comps),
            scale_coefficients=(),
            residual_sd=None,
            loglik=fit.loglik,
            aic=2.0 * npar - 2.0 * fit.loglik,
            bic=math.log(n) * npar - 2.0 * fit.loglik,
            n=n,
            k_groups={"study": model.k},
            method=f"ML (Laplace, {model.family})",
            boundary_flags=fit.boundary_flags,
        )

    model = fit.model
    d = model.design
    coef = _coef_rows(d.coef_names, fit.beta, fit.beta_cov, zcrit)

    scale = ()
    residual_sd = None
    if d.X_disp is None:
        residual_sd = 0.0
    else:
        disp_idx = [i for i, nm in enumerate(fit.param_names) if nm.startswith("disp:")]
        cov = fit.vcov_params[np.ix_(disp_idx, disp_idx)]
        scale = _coef_rows(d.disp_names, fit.delta, cov, zcrit)
        if len(d.disp_names) == 1:
            residual_sd = math.exp(float(fit.delta[0]))

    npar = len(d.coef_names) + len(fit.params)
    return Summary(
        coefficients=coef,
        variance_components=_gaussian_components(fit),
        scale_coefficients=scale,
        residual_sd=residual_sd,
        loglik=fit.loglik,
        aic=2.0 * npar - 2.0 * fit.loglik,
        bic=math.log(d.n) * npar - 2.0 * fit.loglik,
        n=d.n,
        k_groups={t.term.group: len(t.group_levels) for t in d.terms},
        method="REML" if model.reml else "ML",
        boundary_flags=fit.boundary_flags,
    )


def variance_component(fit: FitResult, name: str) -> float:
    """One named variance component from a converged fit."""
    for comp in summarize(fit).variance_components:
        if comp.name == name:
            return comp.variance
    raise DataError(f"no variance component named {name!r}")


def phylo_signal(fit: FitResult, phylo_name: str, species_name: str) -> float:
    """Proportion of species-level variance that is phylogenetically
    structured: var_phylo / (var_phylo + var_species).

    Returns 0.0 with a warning when both components are zero.
    """
    vp = variance_component(fit, phylo_name)
    vs = variance_component(fit, species_name)
    if vp + vs == 0.0:
        warnings.warn("phylogenetic signal undefined: both components are zero")
        return 0.0
    return vp / (vp + vs)


@dataclass(frozen=True)
class BackTransformed:
    proportion: float
    lo: float
    hi: float


def back_transform_logit(estimate, se, level: float = 0.95) -> BackTransformed:
    """Map a logit-scale estimate and Wald interval to the proportion scale.

    The logistic transform is monotone, so the interval endpoints map
    directly (delta-method endpoints on the response scale).
    """
    zcrit = float(norm.ppf(0.5 + level / 2.0))
    return BackTransformed(
        float(expit(estimate)),
        float(expit(estimate - zcrit * se)),
        float(expit(estimate + zcrit * se)),
    )


# ----------------------------------------------------------------------
# canonical JSON serialization
# ----------------------------------------------------------------------


def _round_floats(obj, sig):
    if isinstance(obj, float):
        if not np.isfinite(obj):
            return None
        if sig is None:
            return obj
        return float(f"{obj:.{sig}g}")
    if isinstance(obj, dict):
        return {k: _round_floats(v, sig) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v, sig) for v in obj]
    return obj


def summary_json(summary: Summary, exact: bool = False, **extra) -> str:
    """Serialize a summary as canonical JSON: sorted keys, 6 significant
    digits by default, full precision when ``exact`` is set."""
    payload = asdict(summary)
    payload["coefficients"] = [asdict(c) for c in summary.coefficients]
    payload["scale_coefficients"] = [asdict(c) for c in summary.scale_coefficients]
    payload["variance_components"] = [asdict(c) for c in summary.variance_components]
    payload.update(extra)
    payload = _round_floats(payload, None if exact else 6)
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"
