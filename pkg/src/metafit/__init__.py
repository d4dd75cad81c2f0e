"""metafit: likelihood-based meta-analytic mixed models with known
sampling-error covariance matrices."""

from .covstruct import CovarianceStructure, initial_theta, materialize
from .data import (
    ArmTable,
    EffectSizeTable,
    SamplingCovariance,
    diag_vcv,
    escalc,
    load_arm_table,
    load_table,
    read_vcv,
    vcalc_constant_rho,
    write_vcv,
)
from .errors import DataError, FitError, FormulaError, MetafitError
from .formula import ModelSpec, RandomTerm, build_design, parse_dispformula, parse_formula
from .gaussian import FitResult, GaussianModel, fit, fit_from_formula, nll, profile_ci
from .glmm import OneStageModel, fit_onestage, joint_logdensity, laplace_nll
from .inference import back_transform_logit, phylo_signal, summarize, summary_json
from .simbench import MetricsReport, SimConfig, generate, run

__version__ = "0.1.0"

__all__ = [
    "ArmTable",
    "CovarianceStructure",
    "DataError",
    "EffectSizeTable",
    "FitError",
    "FitResult",
    "FormulaError",
    "GaussianModel",
    "MetafitError",
    "MetricsReport",
    "ModelSpec",
    "OneStageModel",
    "RandomTerm",
    "SamplingCovariance",
    "SimConfig",
    "back_transform_logit",
    "build_design",
    "diag_vcv",
    "escalc",
    "fit",
    "fit_from_formula",
    "fit_onestage",
    "generate",
    "initial_theta",
    "joint_logdensity",
    "laplace_nll",
    "load_arm_table",
    "load_table",
    "materialize",
    "nll",
    "parse_dispformula",
    "parse_formula",
    "phylo_signal",
    "profile_ci",
    "read_vcv",
    "run",
    "summarize",
    "summary_json",
    "vcalc_constant_rho",
    "write_vcv",
]
