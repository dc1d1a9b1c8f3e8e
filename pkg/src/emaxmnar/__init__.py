"""Binary Emax dose-response fitting when outcomes are nonignorably missing.

Missing binary responses enter as weighted pseudo-observations inside an EM
loop that jointly fits the logit-scale Emax curve and a logistic model of
the missingness mechanism; a Jeffreys-prior (Firth) penalized variant keeps
estimates finite under separation. Baseline complete-case and
non-responder-imputation fits, a seeded replication harness and bootstrap
dose-response bands are included, plus a CLI (``emaxmnar fit | simulate |
bootstrap``).
"""

__version__ = "0.1.0"

from .exceptions import (
    BootstrapError,
    ConfigError,
    DatasetFormatError,
    DimensionMismatchError,
    DoseLevelsError,
    EmaxMnarError,
    SingularInformationError,
)
from .model_core import (
    AlphaParams,
    EmaxParams,
    FitReport,
    PseudoData,
    PseudoRecord,
    TrialRecord,
    a_matrix,
    alpha_loglik,
    emax_loglik,
    eta,
    expit,
    grad_eta,
    logit,
    missing_prob,
    success_prob,
    trial_records_from_arrays,
)
from .emax_fit import (
    NewtonControls,
    default_theta_init,
    emax_hessian,
    emax_score,
    firth_score_theta,
    fisher_info_theta,
    fit_emax,
    jeffreys_penalty_theta,
)
from .missing_fit import (
    alpha_info,
    alpha_score,
    firth_score_alpha,
    fit_missingness,
    hat_diagonals,
    jeffreys_penalty_alpha,
)
from .em_engine import (
    EmControls,
    EmFit,
    e_step_weights,
    em_fit,
    expand_dataset,
    louis_information,
    observed_data_loglik,
    wald_ci,
)
from .baselines import fit_cc, fit_nri
from .simulate import (
    BootstrapCurve,
    CurvePoint,
    MetricsRow,
    ReplicateRow,
    SimDesign,
    aggregate_metrics,
    bootstrap_dose_response,
    child_seed,
    fit_by_method,
    generate_trial,
    generate_trial_arrays,
    replicate_estimates,
    run_replications,
)
from .estimators import EmaxDoseResponse

__all__ = [
    "__version__",
    # types
    "EmaxParams",
    "AlphaParams",
    "TrialRecord",
    "PseudoRecord",
    "PseudoData",
    "FitReport",
    "NewtonControls",
    "EmControls",
    "EmFit",
    "SimDesign",
    "MetricsRow",
    "ReplicateRow",
    "CurvePoint",
    "BootstrapCurve",
    # core functions
    "expit",
    "logit",
    "eta",
    "success_prob",
    "grad_eta",
    "a_matrix",
    "missing_prob",
    "emax_loglik",
    "alpha_loglik",
    "trial_records_from_arrays",
    # fitting
    "emax_score",
    "emax_hessian",
    "fisher_info_theta",
    "jeffreys_penalty_theta",
    "firth_score_theta",
    "default_theta_init",
    "fit_emax",
    "alpha_score",
    "alpha_info",
    "hat_diagonals",
    "jeffreys_penalty_alpha",
    "firth_score_alpha",
    "fit_missingness",
    "expand_dataset",
    "e_step_weights",
    "observed_data_loglik",
    "em_fit",
    "louis_information",
    "wald_ci",
    "fit_cc",
    "fit_nri",
    # harness
    "child_seed",
    "generate_trial",
    "generate_trial_arrays",
    "fit_by_method",
    "replicate_estimates",
    "aggregate_metrics",
    "run_replications",
    "bootstrap_dose_response",
    # estimator API
    "EmaxDoseResponse",
    # errors
    "EmaxMnarError",
    "DimensionMismatchError",
    "DoseLevelsError",
    "SingularInformationError",
    "DatasetFormatError",
    "ConfigError",
    "BootstrapError",
]
