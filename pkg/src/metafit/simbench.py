"""Simulation harness: generate meta-analytic datasets for four effect-size
measures, fit the requested two-stage and one-stage models, and aggregate
performance metrics.

Data generation is counter-based: each replicate draws from its own Philox
stream keyed by (seed, rep), so datasets are identical no matter how reps
are scheduled across workers.  Replicates enter metric aggregation only
when every requested model converged in that replicate.  Wall-clock timing
is recorded per fit but kept out of the deterministic report payload.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, logit

from . import gaussian
from .data import ArmTable, EffectSizeTable, diag_vcv, escalc
from .errors import DataError
from .glmm import OneStageModel, fit_onestage
from .inference import summarize

MODELS = ("NN", "BN", "PN")

NN_FORMULA = "y ~ 1 + (1|study) + equalto(0 + obs|g,V)"


@dataclass(frozen=True)
class SimConfig:
    """One simulation cell.

    The default baseline parameters are artifact choices, not values taken
    from any published design; every knob is configurable.
    """

    measure: str
    k: int
    mu: float
    tau2: float
    n_lo: int = 20
    n_hi: int = 100
    control_mean: float = 10.0
    control_sd: float = 2.0
    control_risk: float = 0.1
    control_rate: float = 0.05
    time: float = 100.0
    n_reps: int = 100
    seed: int = 1
    models: tuple = ("NN",)
    reml: bool = True

    def __post_init__(self):
        if self.measure not in ("SMD", "lnRR", "lnOR", "lnIRR"):
            raise DataError(f"unknown measure {self.measure!r}")
        if self.k < 2:
            raise DataError("k must be >= 2")
        if self.tau2 < 0:
            raise DataError("tau2 must be >= 0")
        if self.n_reps < 1:
            raise DataError("n_reps must be >= 1")
        if not (2 <= self.n_lo <= self.n_hi):
            raise DataError("need 2 <= n_lo <= n_hi")
        if not 0.0 < self.control_risk < 1.0:
            raise DataError("control_risk must be in (0, 1)")
        if self.control_mean <= 0 or self.control_sd <= 0:
            raise DataError("control mean/sd must be > 0")
        if self.control_rate <= 0 or self.time <= 0:
            raise DataError("control rate and time must be > 0")
        object.__setattr__(self, "models", tuple(self.models))
        bad = set(self.models) - set(MODELS)
        if bad:
            raise DataError(f"unknown models: {sorted(bad)}")
        if "BN" in self.models and self.measure != "lnOR":
            raise DataError("BN one-stage fits require measure lnOR")
        if "PN" in self.models and self.measure != "lnIRR":
            raise DataError("PN one-stage fits require measure lnIRR")


@dataclass(frozen=True)
class SimDataset:
    effects: EffectSizeTable | None
    arms: ArmTable | None
    theta_true: np.ndarray
    continuity_count: int


def _rng_for(cfg: SimConfig, rep: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[cfg.seed, rep]))


def _sample_normal_arms(rng, n, mean, sd):
    """Sufficient statistics of a normal sample: mean and SD draws."""
    mhat = rng.normal(mean, sd / np.sqrt(n))
    s2hat = sd**2 * rng.chisquare(n - 1) / (n - 1)
    return mhat, np.sqrt(s2hat)


def generate(cfg: SimConfig, rep: int) -> SimDataset:
    """Generate one replicate's dataset, deterministically in (seed, rep).

    Per study a true effect is drawn from N(mu, tau2), then raw arm data
    under the measure's model: normal arms for SMD/lnRR (the treated mean is
    shifted on the control-SD scale for SMD and multiplied by exp(theta) for
    lnRR, with a common arm SD), binomial arms with the control odds shifted
    by exp(theta) for lnOR, and Poisson arms with rate ratio exp(theta) for
    lnIRR.  Zero cells are continuity-handled in escalc and counted.
    """
    rng = _rng_for(cfg, rep)
    k = cfg.k
    theta = cfg.mu + np.sqrt(cfg.tau2) * rng.standard_normal(k)
    n1 = rng.integers(cfg.n_lo, cfg.n_hi + 1, size=k)
    n2 = rng.integers(cfg.n_lo, cfg.n_hi + 1, size=k)
    study = [str(i + 1) for i in range(k)]

    if cfg.measure in ("SMD", "lnRR"):
        mc, sc = cfg.control_mean, cfg.control_sd
        mt = mc + theta * sc if cfg.measure == "SMD" else mc * np.exp(theta)
        m1 = np.empty(k)
        s1 = np.empty(k)
        m2 = np.empty(k)
        s2 = np.empty(k)
        for i in range(k):
            m1[i], s1[i] = _sample_normal_arms(rng, n1[i], mt[i], sc)
            m2[i], s2[i] = _sample_normal_arms(rng, n2[i], mc, sc)
            if cfg.measure == "lnRR":
                # redraw the rare non-positive sampled mean; same stream,
                # so the dataset stays a pure function of (seed, rep)
                while m1[i] <= 0 or m2[i] <= 0:
                    m1[i], s1[i] = _sample_normal_arms(rng, n1[i], mt[i], sc)
                    m2[i], s2[i] = _sample_normal_arms(rng, n2[i], mc, sc)
        stats = {
            "study": study,
            "m1": m1, "sd1": s1, "n1": n1.astype(float),
            "m2": m2, "sd2": s2, "n2": n2.astype(float),
        }
        table = escalc(cfg.measure, stats)
        return SimDataset(_with_formula_columns(table), None, theta, 0)

    if cfg.measure == "lnOR":
        pc = cfg.control_risk
        pt = expit(logit(pc) + theta)
        x1 = rng.binomial(n1, pt)
        x2 = rng.binomial(n2, pc)
        arms = ArmTable(
            study + study,
            ["treatment"] * k + ["control"] * k,
            np.concatenate([x1, x2]).astype(float),
            np.concatenate([n1, n2]).astype(float),
        )
        stats = {
            "study": study,
            "a": x1.astype(float), "b": (n1 - x1).astype(float),
            "c": x2.astype(float), "d": (n2 - x2).astype(float),
        }
        table = escalc("lnOR", stats, continuity=True)
    else:
        rc = cfg.control_rate
        rt = rc * np.exp(theta)
        t1 = np.full(k, cfg.time)
        t2 = np.full(k, cfg.time)
        x1 = rng.poisson(rt * t1)
        x2 = rng.poisson(rc * t2)
        arms = ArmTable(
            study + study,
            ["treatment"] * k + ["control"] * k,
            np.concatenate([x1, x2]).astype(float),
            np.concatenate([t1, t2]),
        )
        stats = {
            "study": study,
            "x1": x1.astype(float), "t1": t1,
            "x2": x2.astype(float), "t2": t2,
        }
        table = escalc("lnIRR", stats, continuity=True)
    cc = int(np.sum(table.moderators["continuity"]))
    return SimDataset(_with_formula_columns(table), arms, theta, cc)


def _with_formula_columns(table: EffectSizeTable) -> EffectSizeTable:
    """Add the study/obs/g columns the two-stage model formula references."""
    mods = dict(table.moderators)
    mods["study"] = np.asarray(table.cluster_id, dtype=object)
    mods["obs"] = np.asarray(table.obs_id, dtype=object)
    mods["g"] = np.asarray(["1"] * table.n, dtype=object)
    return EffectSizeTable(table.obs_id, table.cluster_id, table.y, table.v, mods)


@dataclass(frozen=True)
class RepOutcome:
    converged: bool
    mu_hat: float = np.nan
    se: float = np.nan
    ci_lo: float = np.nan
    ci_hi: float = np.nan
    tau2_hat: float = np.nan
    seconds: float = 0.0


def _fit_nn(table: EffectSizeTable, reml: bool) -> RepOutcome:
    t0 = time.perf_counter()
    try:
        V = diag_vcv(table)
        fit = gaussian.fit_from_formula(
            table, NN_FORMULA, "~0", {"V": V}, reml=reml
        )
    except DataError:
        return RepOutcome(False, seconds=time.perf_counter() - t0)
    dt = time.perf_counter() - t0
    if not fit.converged:
        return RepOutcome(False, seconds=dt)
    s = summarize(fit)
    row = s.coefficients[0]
    tau2 = s.variance_components[0].variance
    return RepOutcome(True, row.estimate, row.se, row.wald_lo, row.wald_hi, tau2, dt)


def _fit_onestage(arms: ArmTable, family: str) -> RepOutcome:
    t0 = time.perf_counter()
    try:
        fit = fit_onestage(OneStageModel(family, arms))
    except DataError:
        return RepOutcome(False, seconds=time.perf_counter() - t0)
    dt = time.perf_counter() - t0
    if not fit.converged:
        return RepOutcome(False, seconds=dt)
    s = summarize(fit)
    row = next(c for c in s.coefficients if c.name == "mu")
    tau2 = next(c for c in s.variance_components if c.name == "study").variance
    return RepOutcome(True, row.estimate, row.se, row.wald_lo, row.wald_hi, tau2, dt)


def run_rep(cfg: SimConfig, rep: int) -> dict:
    """Fit every requested model on replicate ``rep``; returns model -> RepOutcome."""
    data = generate(cfg, rep)
    out = {}
    for m in cfg.models:
        if m == "NN":
            out[m] = _fit_nn(data.effects, cfg.reml)
        elif m == "BN":
            out[m] = _fit_onestage(data.arms, "binomial")
        else:
            out[m] = _fit_onestage(data.arms, "poisson")
    return out


@dataclass(frozen=True)
class MetricsRow:
    model: str
    measure: str
    k: int
    mu_true: float
    tau2_true: float
    n_reps: int
    n_converged: int
    n_used: int
    bias: float
    rmse: float
    coverage: float
    mean_ci_width: float
    type_i_error: float | None
    power: float | None
    mean_seconds: float


@dataclass(frozen=True)
class MetricsReport:
    config: SimConfig
    rows: tuple
    estimates: tuple = field(default_factory=tuple)  # per model, per used rep


def _worker(args):
    cfg, rep = args
    return rep, run_rep(cfg, rep)


def run(cfg: SimConfig, threads: int = 1, keep_estimates: bool = False) -> MetricsReport:
    """Run all replicates of one configuration and aggregate metrics.

    A replicate enters aggregation only if all requested models converged.
    Coverage is the fraction of used replicates whose 95% Wald interval
    contains the true mu; the rejection rate of the z-test at the 5% level
    is reported as type-I error when mu = 0 and as power otherwise.
    """
    if not cfg.models:
        return MetricsReport(cfg, ())
    reps = range(cfg.n_reps)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = dict(pool.map(_worker, [(cfg, r) for r in reps], chunksize=8))
        per_rep = [results[r] for r in reps]
    else:
        per_rep = [run_rep(cfg, r) for r in reps]
    return aggregate(cfg, per_rep, keep_estimates=keep_estimates)


def aggregate(cfg: SimConfig, per_rep, keep_estimates: bool = False) -> MetricsReport:
    """Reduce per-replicate outcomes to a MetricsReport.

    The reduction treats replicates as an unordered collection, so any
    permutation of ``per_rep`` yields identical metrics.
    """
    used = [r for r in per_rep if all(r[m].converged for m in cfg.models)]
    # canonical order makes float reductions exactly permutation-invariant
    used.sort(key=lambda r: tuple((r[m].mu_hat, r[m].se) for m in cfg.models))
    rows = []
    estimates = []
    for m in cfg.models:
        n_conv = sum(1 for r in per_rep if r[m].converged)
        mu_hat = np.array([r[m].mu_hat for r in used])
        lo = np.array([r[m].ci_lo for r in used])
        hi = np.array([r[m].ci_hi for r in used])
        secs = float(np.mean([r[m].seconds for r in per_rep])) if per_rep else 0.0
        if len(used):
            bias = float(np.mean(mu_hat - cfg.mu))
            rmse = float(np.sqrt(np.mean((mu_hat - cfg.mu) ** 2)))
            coverage = float(np.mean((lo <= cfg.mu) & (cfg.mu <= hi)))
            width = float(np.mean(hi - lo))
            reject = float(np.mean((lo > 0.0) | (hi < 0.0)))
        else:
            bias = rmse = coverage = width = reject = float("nan")
        rows.append(
            MetricsRow(
                model=m,
                measure=cfg.measure,
                k=cfg.k,
                mu_true=cfg.mu,
                tau2_true=cfg.tau2,
                n_reps=cfg.n_reps,
                n_converged=n_conv,
                n_used=len(used),
                bias=bias,
                rmse=rmse,
                coverage=coverage,
                mean_ci_width=width,
                type_i_error=reject if cfg.mu == 0.0 else None,
                power=reject if cfg.mu != 0.0 else None,
                mean_seconds=secs,
            )
        )
        if keep_estimates:
            estimates.append(
                (m, tuple((float(r[m].mu_hat), float(r[m].tau2_hat)) for r in used))
            )
    return MetricsReport(cfg, tuple(rows), tuple(estimates))


def run_grid(configs, threads: int = 1) -> list:
    """Run several configurations; returns a list of MetricsReports."""
    return [run(replace(c), threads=threads) for c in configs]


_CSV_FIELDS = (
    "model", "measure", "k", "mu_true", "tau2_true", "n_reps",
    "n_converged", "n_used", "bias", "rmse", "coverage",
    "mean_ci_width", "type_i_error", "power",
)


def report_csv(reports) -> str:
    """Deterministic CSV: one row per model x measure x config.

    Timing is intentionally excluded here (it varies run to run); use
    :func:`timing_csv` for the wall-time sidecar.
    """
    lines = [",".join(_CSV_FIELDS)]
    for rep in reports:
        for row in rep.rows:
            vals = []
            for f in _CSV_FIELDS:
                v = getattr(row, f)
                if v is None:
                    vals.append("")
                elif isinstance(v, float):
                    vals.append(repr(v))
                else:
                    vals.append(str(v))
            lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def timing_csv(reports) -> str:
    lines = ["model,measure,k,mu_true,tau2_true,mean_seconds"]
    for rep in reports:
        for row in rep.rows:
            lines.append(
                f"{row.model},{row.measure},{row.k},{row.mu_true!r},"
                f"{row.tau2_true!r},{row.mean_seconds!r}"
            )
    return "\n".join(lines) + "\n"


def report_json(reports) -> str:
    import json

    payload = []
    for rep in reports:
        for row in rep.rows:
            d = {f: getattr(row, f) for f in _CSV_FIELDS}
            payload.append(d)
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"
