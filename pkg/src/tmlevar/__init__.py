"""Longitudinal TMLE with robust and bootstrap variance estimators."""

__version__ = "0.1.0"

from .data import (
    LongitudinalDataset,
    OutcomeScale,
    ParseError,
    Regime,
    ValidationError,
    ingest_csv,
    regime_indicator,
    scale_outcome,
    unscale_outcome,
)
from .estimators import (
    AIPWEstimator,
    EifDecomposition,
    EstimateResult,
    IPWEstimator,
    TMLEEstimator,
    aipw_mean,
    contrast,
    eif_values,
    ipw_mean,
    modified_tmle_mean,
    tmle_mean,
)
from .glm import GlmFit, fit_linear, fit_logistic, predict_logistic
from .msm import (
    InterceptOnlyModel,
    MsmSpec,
    h1_weights,
    msm_intercept_identity_check,
    msm_variance_total,
    sigma2_last_static,
    sigma_t_cross_covariance,
)
from .nuisance import (
    EstimationError,
    SequentialQ,
    TreatmentMechanism,
    clever_weight,
    fit_g,
    fit_sequential_q,
)
from .simgen import DgpConfig, gen_long, gen_point, generate, true_psi
from .experiment import GridSpec, run_grid, run_replicate, summarize
from .variance import (
    VarianceReport,
    VarianceZOutcome,
    bootstrap_targeting_variance,
    convex_combo_variance,
    empirical_eif_variance,
    point_treatment_robust_variance,
    red_flag_report,
    robust_sigma2_t_ipw,
    robust_sigma2_t_tmle,
    robust_variance_total,
    variance_z_outcome,
    wald_inference,
)
