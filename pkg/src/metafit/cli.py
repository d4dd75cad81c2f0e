"""Command-line front end: fit models from files, build covariance
matrices, compute effect sizes, run simulations.

Exit codes: 0 on success, 1 on any input error, 2 when a fit ran but did
not converge (a diagnostic payload is still written).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import simbench
from .data import (
    diag_vcv,
    escalc,
    load_arm_table,
    load_table,
    read_vcv,
    vcalc_constant_rho,
    write_vcv,
)
from .errors import MetafitError
from .gaussian import fit_from_formula
from .glmm import OneStageModel, fit_onestage
from .inference import summarize, summary_json
from .simbench import SimConfig

DEFAULT_GRID_MU = {"SMD": 0.5, "lnRR": 0.2, "lnOR": 0.7, "lnIRR": 0.7}


class _CliInputError(MetafitError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage errors; 2 is reserved for
    # non-convergence here, so remap to an input error
    def error(self, message):
        raise _CliInputError(message)


def _build_parser():
    p = _Parser(prog="metafit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a meta-analytic model")
    f.add_argument("--data", required=True)
    f.add_argument("--formula", default=None,
                   help="conditional model formula (gaussian family)")
    f.add_argument("--dispformula", default="~1")
    f.add_argument("--family", default="gaussian",
                   choices=["gaussian", "binomial", "poisson"])
    g = f.add_mutually_exclusive_group()
    g.add_argument("--reml", dest="reml", action="store_true", default=True)
    g.add_argument("--ml", dest="reml", action="store_false")
    f.add_argument("--vcv", action="append", default=[], metavar="NAME=PATH",
                   help="bind a covariance matrix CSV to a formula name")
    f.add_argument("--zero-disp-jitter", type=float, default=0.0)
    f.add_argument("--level", type=float, default=0.95)
    f.add_argument("--exact", action="store_true",
                   help="full float precision in the JSON output")
    f.add_argument("--out", default=None, help="output JSON path (default stdout)")
    f.add_argument("--study-col", default="study")
    f.add_argument("--arm-col", default="arm")
    f.add_argument("--events-col", default="events")
    f.add_argument("--size-col", default="n")
    f.add_argument("--study-intercepts", default="fixed",
                   choices=["fixed", "random"])

    v = sub.add_parser("vcalc", help="build a constant-correlation covariance CSV")
    v.add_argument("--data", required=True)
    v.add_argument("--rho", type=float, required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--v-col", default="vi")
    v.add_argument("--cluster-col", default="study")
    v.add_argument("--obs-col", default="id")
    v.add_argument("--diag", action="store_true",
                   help="ignore clustering and write diag(v)")

    e = sub.add_parser("escalc", help="compute effect sizes from arm statistics")
    e.add_argument("--measure", required=True,
                   choices=["SMD", "lnRR", "lnOR", "lnIRR"])
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--continuity", action="store_true")
    e.add_argument("--smd-variance", default="g", choices=["g", "d"])

    s = sub.add_parser("simulate", help="run the simulation benchmark")
    s.add_argument("--config", default=None, help="key=value config file")
    s.add_argument("--measure", default=None,
                   choices=["SMD", "lnRR", "lnOR", "lnIRR"],
                   help="omit to run the default four-measure grid")
    s.add_argument("--k", type=int, default=None)
    s.add_argument("--mu", type=float, default=None)
    s.add_argument("--tau2", type=float, default=None)
    s.add_argument("--reps", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--models", default=None, help="comma list from NN,BN,PN")
    s.add_argument("--n-lo", type=int, default=None)
    s.add_argument("--n-hi", type=int, default=None)
    s.add_argument("--threads", type=int, default=None)
    s.add_argument("--out-prefix", required=True)
    return p


def _parse_bindings(pairs):
    out = {}
    for item in pairs:
        if "=" not in item:
            raise _CliInputError(f"--vcv expects NAME=PATH, got {item!r}")
        name, path = item.split("=", 1)
        out[name] = read_vcv(path)
    return out


def _referenced_matrices(formula):
    from .formula import parse_formula

    spec = parse_formula(formula)
    return spec, [t.matrix for t in spec.random_terms if t.matrix is not None]


def cmd_fit(args) -> int:
    if args.family == "gaussian":
        if args.formula is None:
            raise _CliInputError("--formula is required for the gaussian family")
        spec, wanted = _referenced_matrices(args.formula)
        matrices = _parse_bindings(args.vcv)
        for name in wanted:
            if name not in matrices:
                raise _CliInputError(f"matrix {name} unbound")
        table = load_table(args.data, {"y": spec.response})
        fit = fit_from_formula(
            table,
            args.formula,
            args.dispformula,
            matrices,
            reml=args.reml,
            zero_disp_jitter=args.zero_disp_jitter,
        )
    else:
        for flag, val, default in (
            ("--formula", args.formula, None),
            ("--dispformula", args.dispformula, "~1"),
        ):
            if val != default:
                raise _CliInputError(
                    f"{flag} is not supported with --family {args.family}; "
                    "one-stage models have a fixed specification"
                )
        arms = load_arm_table(
            args.data,
            {
                "study": args.study_col,
                "arm": args.arm_col,
                "events": args.events_col,
                "size": args.size_col,
            },
        )
        fit = fit_onestage(
            OneStageModel(args.family, arms, args.study_intercepts)
        )

    if not fit.converged:
        payload = json.dumps(
            {
                "converged": False,
                "message": fit.message,
                "n_iter": fit.n_iter,
                "loglik": fit.loglik,
            },
            sort_keys=True,
            indent=2,
        ) + "\n"
        _write_text(args.out, payload)
        return 2
    text = summary_json(
        summarize(fit, level=args.level), exact=args.exact, converged=True
    )
    _write_text(args.out, text)
    return 0


def cmd_vcalc(args) -> int:
    table = load_table(
        args.data,
        {"y": args.v_col, "v": args.v_col, "cluster": args.cluster_col,
         "obs": args.obs_col},
    )
    cov = diag_vcv(table) if args.diag else vcalc_constant_rho(table, args.rho)
    write_vcv(cov, args.out)
    return 0


def cmd_escalc(args) -> int:
    import pandas as pd

    stats = pd.read_csv(args.data)
    table = escalc(args.measure, stats, continuity=args.continuity,
                   smd_variance=args.smd_variance)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("obs,study,yi,vi\n")
        for o, c, y, v in zip(table.obs_id, table.cluster_id, table.y, table.v):
            fh.write(f"{o},{c},{y!r},{v!r}\n")
    return 0


def _read_config_file(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise _CliInputError(f"config line must be key=value: {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            out[key] = val
    return out


_SIM_KEYS = {
    "measure": str, "k": int, "mu": float, "tau2": float, "reps": int,
    "seed": int, "models": str, "n_lo": int, "n_hi": int, "threads": int,
}


def cmd_simulate(args) -> int:
    settings = {}
    if args.config:
        raw = _read_config_file(args.config)
        for key, val in raw.items():
            if key not in _SIM_KEYS:
                raise _CliInputError(f"unknown config key {key!r}")
            settings[key] = _SIM_KEYS[key](val)
    for key in _SIM_KEYS:
        val = getattr(args, key if key != "reps" else "reps", None)
        if val is not None:
            settings[key] = val

    reps = settings.get("reps")
    if reps is None or reps < 1:
        raise _CliInputError("--reps must be >= 1")
    seed = settings.get("seed", 1)
    threads = settings.get("threads")
    if threads is None:
        threads = int(os.environ.get("METAFIT_THREADS", 0)) or os.cpu_count() or 1

    base = {
        "n_reps": reps,
        "seed": seed,
    }
    for key in ("n_lo", "n_hi"):
        if key in settings:
            base[key] = settings[key]

    def models_for(measure):
        if "models" in settings:
            return tuple(m.strip() for m in settings["models"].split(",") if m.strip())
        return ("NN",)

    configs = []
    if settings.get("measure") is not None:
        cell = dict(base)
        cell["measure"] = settings["measure"]
        cell["k"] = settings.get("k", 10)
        cell["mu"] = settings.get("mu", 0.0)
        cell["tau2"] = settings.get("tau2", 0.1)
        cell["models"] = models_for(cell["measure"])
        configs.append(SimConfig(**cell))
    else:
        # artifact default grid; these values are NOT from any published design
        for measure in ("SMD", "lnRR", "lnOR", "lnIRR"):
            for k in (settings.get("k"),) if settings.get("k") else (10, 30):
                for tau2 in ((settings.get("tau2"),) if settings.get("tau2")
                             is not None else (0.0, 0.1, 0.3)):
                    for mu in ((settings.get("mu"),) if settings.get("mu")
                               is not None else (0.0, DEFAULT_GRID_MU[measure])):
                        configs.append(SimConfig(
                            measure=measure, k=k, mu=mu, tau2=tau2,
                            models=models_for(measure), **base,
                        ))

    reports = [simbench.run(cfg, threads=threads) for cfg in configs]
    prefix = args.out_prefix
    _write_text(prefix + "_metrics.csv", simbench.report_csv(reports))
    _write_text(prefix + "_metrics.json", simbench.report_json(reports))
    _write_text(prefix + "_timing.csv", simbench.timing_csv(reports))
    return 0


def _write_text(path, text):
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "fit": cmd_fit,
            "vcalc": cmd_vcalc,
            "escalc": cmd_escalc,
            "simulate": cmd_simulate,
        }[args.command]
        return handler(args)
    except MetafitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
